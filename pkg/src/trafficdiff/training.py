"""Multi-task training: denoising loss on trajectory rollouts plus the
anchor-based multi-trajectory prediction loss, with AdamW, linear warmup,
staircase decay, and gradient clipping.

One noise level k is drawn per scenario and shared by all its agents; the
per-step k values are recorded in the training trace. Invalid agents and
timesteps are excluded from every loss term.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .diffusion import DiffusionConfig, NoiseSchedule, build_schedule, q_sample
from .dynamics import ActionNormalization, compress_actions, inverse_dynamics_array, repeat_actions, rollout_array
from .model import (
    ModelBundle,
    ModelConfig,
    PriorOutput,
    SceneEncoding,
    anchors_for_bundle,
    build_anchors,
    denoise,
    denoiser_fn,
    encode_scene,
    init_params,
    predict_priors,
)
from .scene import Scenario, encode_scene_features

LOSS_TARGETS = ("rollout_states", "raw_actions", "noise_eps")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.5
    beta: float = 0.05
    lr: float = 2e-4
    warmup_steps: int = 1000
    decay_rate: float = 0.02
    decay_every: int = 1000
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    epochs: int = 4
    batch_size: int = 8
    history_dropout: float = 0.5
    loss_target: str = "rollout_states"
    lambda_weighting: str = "constant_one"  # or "table:<json list of K+1 floats>"
    schedule_kind: str = "log"
    seed: int = 0
    val_fraction: float = 0.1
    val_sampler: str = "ddim:5"
    keep_best: bool = True  # final checkpoint = best validation epoch

    def __post_init__(self):
        if self.loss_target not in LOSS_TARGETS:
            raise ValueError(f"loss_target must be one of {LOSS_TARGETS}")
        if not 0.0 <= self.history_dropout <= 1.0:
            raise ValueError("history_dropout must be in [0, 1]")
        if self.gamma < 0 or self.beta < 0:
            raise ValueError("gamma and beta must be nonnegative")

    def lambda_of(self, k: int) -> float:
        if self.lambda_weighting == "constant_one":
            return 1.0
        if self.lambda_weighting.startswith("table:"):
            table = json.loads(self.lambda_weighting.split(":", 1)[1])
            return float(table[k])
        raise ValueError(f"unknown lambda weighting {self.lambda_weighting!r}")

    def lr_at(self, step: int) -> float:
        warm = min(1.0, (step + 1) / max(self.warmup_steps, 1))
        decay = (1.0 - self.decay_rate) ** (step // self.decay_every)
        return self.lr * warm * decay


@dataclass
class TrainingExample:
    """Precomputed per-scenario targets."""

    scenario: Scenario
    u_norm: np.ndarray  # (A, T_f, 2) compressed, normalized clean actions
    gt_states: np.ndarray  # (A, T, 4) x, y, unwrapped psi, speed over steps 1..T
    step_valid: np.ndarray  # (A, T) bool
    action_valid: np.ndarray  # (A, T_f) bool
    agent_valid: np.ndarray  # (A,) bool


def prepare_example(
    scenario: Scenario, model_cfg: ModelConfig, norm: ActionNormalization
) -> TrainingExample:
    gt = scenario.ground_truth
    accel, yaw = inverse_dynamics_array(gt, scenario.scene.dt)
    u_full = np.stack([accel, yaw], axis=-1)
    u_tf = compress_actions(u_full, model_cfg.action_repeat)
    u_norm = u_tf / np.array([norm.accel_scale, norm.yaw_scale])
    psi_unwrapped = np.unwrap(gt[:, :, 2], axis=1)
    speed = np.hypot(gt[:, :, 3], gt[:, :, 4])
    gt_states = np.stack([gt[:, 1:, 0], gt[:, 1:, 1], psi_unwrapped[:, 1:], speed[:, 1:]], axis=-1)
    agent_valid = np.array([a.valid_now for a in scenario.scene.agents])
    T = gt.shape[1] - 1
    step_valid = np.repeat(agent_valid[:, None], T, axis=1)
    action_valid = np.repeat(agent_valid[:, None], model_cfg.t_f, axis=1)
    return TrainingExample(scenario, u_norm, gt_states, step_valid, action_valid, agent_valid)


def denoising_loss(
    example: TrainingExample,
    enc: SceneEncoding,
    params,
    model_cfg: ModelConfig,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    train_cfg: TrainConfig,
    norm: ActionNormalization,
):
    """Single-scenario denoising loss; returns (loss, k) or (None, k) when no
    valid agent-steps remain."""
    if not example.agent_valid.any():
        return None, 0
    k = int(rng.integers(1, schedule.k_steps + 1))
    eps = rng.standard_normal(example.u_norm.shape)
    u_noised = q_sample(example.u_norm, k, eps, schedule)
    u_hat, states = denoise(u_noised[None], k, enc, params, model_cfg, norm)

    if train_cfg.loss_target == "rollout_states":
        mask = example.step_valid[None, :, :]
        count = max(float(mask.sum()) * 4.0, 1.0)
        gt = example.gt_states
        loss = tt.tensor(0.0)
        for i, comp in enumerate(states):  # x, y, psi, v
            sl = tt.smooth_l1(comp, tt.tensor(gt[None, :, :, i]))
            loss = loss + tt.reduce_sum(tt.masked_fill(sl, ~mask, 0.0))
        loss = loss * (train_cfg.lambda_of(k) / count)
    elif train_cfg.loss_target == "raw_actions":
        mask = example.action_valid[None, :, :, None]
        count = max(float(example.action_valid.sum()) * 2.0, 1.0)
        sl = tt.smooth_l1(u_hat, tt.tensor(example.u_norm[None]))
        loss = tt.reduce_sum(tt.masked_fill(sl, np.broadcast_to(~mask, sl.shape), 0.0)) * (1.0 / count)
    else:  # noise_eps: recover the implied noise estimate algebraically
        ab = schedule.alpha_bar[k]
        eps_hat = (tt.tensor(u_noised[None]) - u_hat * math.sqrt(ab)) * (1.0 / math.sqrt(1.0 - ab))
        mask = example.action_valid[None, :, :, None]
        count = max(float(example.action_valid.sum()) * 2.0, 1.0)
        sl = tt.smooth_l1(eps_hat, tt.tensor(eps[None]))
        loss = tt.reduce_sum(tt.masked_fill(sl, np.broadcast_to(~mask, sl.shape), 0.0)) * (1.0 / count)
    return loss, k


def select_mode(
    anchors_local: np.ndarray,
    pred_states: np.ndarray,
    example: TrainingExample,
) -> np.ndarray:
    """Best mode per agent: nearest anchor to the ground-truth endpoint when it
    is valid, otherwise smallest summed displacement over valid steps. Ties
    resolve to the lowest index via argmin."""
    A, M = anchors_local.shape[:2]
    m_star = np.zeros(A, dtype=int)
    gt = example.gt_states
    for a in range(A):
        if example.step_valid[a, -1]:
            end_local = _endpoint_local(example.scenario, a)
            d = np.linalg.norm(anchors_local[a] - end_local, axis=-1)
            m_star[a] = int(np.argmin(d))
        else:
            valid = example.step_valid[a]
            if not valid.any():
                m_star[a] = 0
                continue
            diff = pred_states[a][:, valid, :2] - gt[a, valid, :2][None]
            m_star[a] = int(np.argmin(np.linalg.norm(diff, axis=-1).sum(axis=-1)))
    return m_star


def _endpoint_local(scenario: Scenario, agent: int) -> np.ndarray:
    from .scene import to_local_frame

    return to_local_frame(
        scenario.ground_truth[agent, -1, :2], scenario.scene.agents[agent].current_pose
    )


def predictor_loss(
    prior: PriorOutput,
    m_star: np.ndarray,
    example: TrainingExample,
    beta: float,
):
    """Best-mode smooth-L1 regression plus cross-entropy on mode scores."""
    A = len(m_star)
    rows = np.arange(A)
    mask = example.step_valid
    count = max(float(mask.sum()) * 4.0, 1.0)
    gt = example.gt_states
    reg = tt.tensor(0.0)
    for i, comp in enumerate(prior.states):  # (A, M, T)
        sel = comp[rows, m_star]  # (A, T)
        sl = tt.smooth_l1(sel, tt.tensor(gt[:, :, i]))
        reg = reg + tt.reduce_sum(tt.masked_fill(sl, ~mask, 0.0))
    reg = reg * (1.0 / count)
    logp = tt.log_softmax(prior.logits, axis=-1)
    picked = logp[rows, m_star]  # (A,)
    valid = example.agent_valid
    n_valid = max(float(valid.sum()), 1.0)
    ce = -tt.reduce_sum(tt.masked_fill(picked, ~valid, 0.0)) * (1.0 / n_valid)
    return reg + beta * ce, ce


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)  # per-epoch dicts
    trace: list = field(default_factory=list)  # per-step {step, k, loss}
    duration_s: float = 0.0
    final_val_ade: float = float("nan")
    baseline_val_ade: float = float("nan")

    def to_json(self) -> dict:
        # wall-clock duration stays off the report so outputs are
        # byte-identical across reruns; it lives in the run manifest
        return {
            "epochs": self.epochs,
            "final_val_ade": self.final_val_ade,
            "baseline_val_ade": self.baseline_val_ade,
            "trace_k": [t["k"] for t in self.trace],
        }


def split_dataset(scenarios, val_fraction: float):
    """Deterministic index partition: every floor(1/f)-th scenario validates."""
    if val_fraction <= 0:
        return list(scenarios), []
    stride = max(int(round(1.0 / val_fraction)), 2)
    train, val = [], []
    for i, s in enumerate(scenarios):
        (val if i % stride == 0 else train).append(s)
    return train, val


def constant_velocity_rollout(scenario: Scenario) -> np.ndarray:
    """(A, T, 2) positions from holding each agent's current velocity."""
    gt = scenario.ground_truth
    T = gt.shape[1] - 1
    steps = np.arange(1, T + 1)[None, :, None] * scenario.scene.dt
    return gt[:, 0:1, 0:2] + gt[:, 0:1, 3:5] * steps


def open_loop_ade(positions: np.ndarray, scenario: Scenario) -> float:
    gt = scenario.ground_truth[:, 1:, :2]
    valid = np.array([a.valid_now for a in scenario.scene.agents])
    err = np.linalg.norm(positions - gt, axis=-1)
    return float(err[valid].mean())


def sample_open_loop(
    bundle: ModelBundle, scenario: Scenario, schedule, sampler: str, seed: int, n_samples: int = 1
) -> np.ndarray:
    """(S, A, T, 2) sampled positions with inference-time history dropout."""
    from .diffusion import sample

    rng = np.random.default_rng(seed)
    feats = encode_scene_features(scenario.scene, history_dropout=1.0, rng=rng)
    with tt.no_grad():
        enc = encode_scene(feats, bundle.params, bundle.model_config)
    fn = denoiser_fn(enc, bundle.params, bundle.model_config, bundle.norm)
    A = feats.n_agents
    shape = (n_samples, A, bundle.model_config.t_f, 2)
    u = sample(fn, shape, schedule, rng, sampler=sampler)
    scales = np.array([bundle.norm.accel_scale, bundle.norm.yaw_scale])
    u_phys = repeat_actions(u * scales, bundle.model_config.action_repeat)
    init = np.broadcast_to(feats.current_states, (n_samples, A, 5))
    states = rollout_array(init, u_phys, scenario.scene.dt)
    return states[:, :, 1:, 0:2]


def validate_ade(bundle: ModelBundle, scenarios, schedule, sampler: str, seed: int) -> float:
    if not scenarios:
        return float("nan")
    total = []
    for i, sc in enumerate(scenarios):
        pos = sample_open_loop(bundle, sc, schedule, sampler, seed + i)[0]
        total.append(open_loop_ade(pos, sc))
    return float(np.mean(total))


def baseline_ade(scenarios) -> float:
    return float(np.mean([open_loop_ade(constant_velocity_rollout(s), s) for s in scenarios]))


def train(
    scenarios,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    diff_cfg: DiffusionConfig,
    out_dir,
    norm: ActionNormalization = ActionNormalization(),
    log=lambda msg: None,
) -> tuple[ModelBundle, TrainReport]:
    if not scenarios:
        raise ValueError("empty dataset")
    os.makedirs(out_dir, exist_ok=True)
    t_start = time.monotonic()
    train_set, val_set = split_dataset(scenarios, train_cfg.val_fraction)
    anchors = build_anchors(train_set, model_cfg.modes, seed=train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    params = init_params(model_cfg, rng)
    schedule = build_schedule(train_cfg.schedule_kind, diff_cfg)
    bundle = ModelBundle(params, anchors, model_cfg, diff_cfg, train_cfg.schedule_kind, norm)
    state = tt.adamw_init(params)
    examples = [prepare_example(s, model_cfg, norm) for s in train_set]
    report = TrainReport()
    step = 0
    best = (math.inf, None)  # (val ADE, params snapshot)
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(len(examples))
        sums = {"total": 0.0, "denoise": 0.0, "predictor": 0.0, "batches": 0}
        for start in range(0, len(order), train_cfg.batch_size):
            batch = order[start : start + train_cfg.batch_size]
            batch_total = 0.0
            batch_den = 0.0
            batch_pred = 0.0
            for idx in batch:
                ex = examples[idx]
                feats = encode_scene_features(ex.scenario.scene, train_cfg.history_dropout, rng)
                with tt.tape() as tape:
                    enc = encode_scene(feats, params, model_cfg)
                    d_loss, k = denoising_loss(
                        ex, enc, params, model_cfg, schedule, rng, train_cfg, norm
                    )
                    if d_loss is None:
                        continue
                    total = d_loss
                    p_loss_val = 0.0
                    if train_cfg.gamma > 0:
                        prior = predict_priors(enc, anchors, params, model_cfg, norm)
                        anchors_local = anchors_for_bundle(anchors, feats, model_cfg.modes)
                        m_star = select_mode(anchors_local, prior.states_numpy(), ex)
                        p_loss, _ = predictor_loss(prior, m_star, ex, train_cfg.beta)
                        total = d_loss + train_cfg.gamma * p_loss
                        p_loss_val = float(p_loss.data)
                    value = float(total.data)
                    if not math.isfinite(value):
                        raise TrainingDiverged(
                            f"non-finite loss at step {step} (k={k}, scenario {idx})"
                        )
                    tape.backward(total * (1.0 / len(batch)))
                batch_total += value / len(batch)
                batch_den += float(d_loss.data) / len(batch)
                batch_pred += p_loss_val / len(batch)
                report.trace.append({"step": step, "scenario": int(idx), "k": k})
            grads = {n: p.grad for n, p in params.items() if p.grad is not None}
            if grads:
                tt.clip_grad_norm(grads, train_cfg.grad_clip)
                tt.adamw_step(
                    params,
                    grads,
                    state,
                    lr=train_cfg.lr_at(step),
                    weight_decay=train_cfg.weight_decay,
                )
            for p in params.values():
                p.zero_grad()
            step += 1
            sums["total"] += batch_total
            sums["denoise"] += batch_den
            sums["predictor"] += batch_pred
            sums["batches"] += 1
        n = max(sums["batches"], 1)
        val_ade = validate_ade(bundle, val_set, schedule, train_cfg.val_sampler, train_cfg.seed)
        epoch_row = {
            "epoch": epoch,
            "train_total": sums["total"] / n,
            "train_denoise": sums["denoise"] / n,
            "train_predictor": sums["predictor"] / n,
            "val_ade": val_ade,
            "lr": train_cfg.lr_at(step),
        }
        report.epochs.append(epoch_row)
        log(f"epoch {epoch}: total={epoch_row['train_total']:.4f} val_ade={val_ade:.3f}")
        bundle.save(os.path.join(out_dir, f"checkpoint_epoch{epoch}.ckpt"))
        if train_cfg.keep_best and val_set and val_ade < best[0]:
            best = (val_ade, {n: p.data.copy() for n, p in params.items()})
    if train_cfg.keep_best and best[1] is not None:
        for n, p in params.items():
            p.data = best[1][n]
        report.final_val_ade = best[0]
    else:
        report.final_val_ade = report.epochs[-1]["val_ade"] if report.epochs else float("nan")
    report.duration_s = time.monotonic() - t_start
    report.baseline_val_ade = baseline_ade(val_set) if val_set else float("nan")
    bundle.save(os.path.join(out_dir, "model.ckpt"))
    _write_report(out_dir, report)
    return bundle, report


def _write_report(out_dir, report: TrainReport):
    with open(os.path.join(out_dir, "training_report.csv"), "w", newline="") as f:
        if report.epochs:
            w = csv.DictWriter(f, fieldnames=list(report.epochs[0].keys()))
            w.writeheader()
            w.writerows(report.epochs)
    with open(os.path.join(out_dir, "training_report.json"), "w") as f:
        json.dump(report.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
