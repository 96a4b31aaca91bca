"""Compositional guided sampling.

Objectives (goal reaching, overlap avoidance, staying on-road, rush) shift the
reverse-process mean along their gradient at each denoising step; gradients
flow either through the denoiser (differentiating the one-step clean estimate)
or directly on the mean treated as actions. The same machinery drives
conflict-prior selection and the two-agent pursuit-evasion game solved by
alternating gradient steps during denoising.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as tt
from .diffusion import NoiseSchedule, ddim_step, ddim_stride, parse_sampler, posterior_mean
from .dynamics import ActionNormalization
from .model import ModelConfig, SceneEncoding, denoise, rollout_tensor
from .scene import road_edge_segments, sat_signed_distance

PLACEMENTS = ("on_mean", "through_denoiser")
TERM_KINDS = ("goal", "collision_avoid", "onroad", "rush")


class GuidanceError(RuntimeError):
    pass


@dataclass
class GuidanceTerm:
    kind: str
    agents: list | None = None  # target agent indices; None = all valid agents
    weight: float = 1.0
    goals: list | None = None  # [[x, y], ...] aligned with agents, kind=goal
    overlap_threshold: float = 2.0  # meters, kind=collision_avoid

    def __post_init__(self):
        if self.kind not in TERM_KINDS:
            raise GuidanceError(f"unknown guidance term kind {self.kind!r}")
        if self.kind == "goal" and (self.goals is None or self.agents is None):
            raise GuidanceError("goal term needs agents and goals")


@dataclass
class GameSpec:
    evader: int
    pursuer: int
    descent_steps: int = 1
    ascent_steps: int = 2
    outer_steps: int = 5
    strength: float = 0.1
    sigma_scale: float = 1.0
    road_weight: float = 1.0
    smooth_min_tau: float = 1.0
    placement: str = "on_mean"  # gradients on the mean's rollout or through the denoiser
    evader_mask: list | None = None  # per-timestep gradient gates, length T_f
    pursuer_mask: list | None = None

    def __post_init__(self):
        if self.evader == self.pursuer:
            raise GuidanceError("evader and pursuer must differ")
        if self.descent_steps < 0 or self.ascent_steps < self.descent_steps:
            raise GuidanceError("need ascent_steps >= descent_steps >= 0")
        if self.placement not in PLACEMENTS:
            raise GuidanceError(f"placement must be one of {PLACEMENTS}")


@dataclass
class GuidanceSpec:
    terms: list = field(default_factory=list)
    n_grad_steps: int = 5
    strength: float = 0.1
    placement: str = "through_denoiser"
    prior_prob_threshold: float = 0.05
    game: GameSpec | None = None

    def __post_init__(self):
        if self.n_grad_steps < 1:
            raise GuidanceError("n_grad_steps must be >= 1")
        if self.strength < 0:
            raise GuidanceError("strength must be nonnegative")  # 0 = no-op guidance
        if self.placement not in PLACEMENTS:
            raise GuidanceError(f"placement must be one of {PLACEMENTS}")
        self.terms = [t if isinstance(t, GuidanceTerm) else GuidanceTerm(**t) for t in self.terms]
        if self.game is not None and not isinstance(self.game, GameSpec):
            self.game = GameSpec(**self.game)

    def to_json(self) -> str:
        doc = asdict(self)
        return json.dumps(doc, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "GuidanceSpec":
        return GuidanceSpec(**json.loads(text))


# ---------------------------------------------------------------------------
# differentiable geometry
# ---------------------------------------------------------------------------


def smooth_min(x, tau: float):
    """Log-sum-exp soft minimum over all elements; approaches the hard min as
    tau -> 0. Shifted by the (constant) hard min for stability."""
    m = float(np.min(x.data))
    lse = tt.log(tt.reduce_sum(tt.exp((x - m) * (-1.0 / tau))) + 1e-12)
    return m - lse * tau


def pair_box_gaps(xa, ya, ha, dims_a, xb, yb, hb, dims_b):
    """Differentiable SAT signed distance between oriented boxes.

    All position/heading args are tensors of one shape; dims are (length,
    width) constants broadcastable to it. Positive = clearance, negative =
    penetration (same convention as scene.sat_signed_distance).
    """
    la, wa = dims_a
    lb, wb = dims_b
    dcx = xb - xa
    dcy = yb - ya
    gaps = []
    for h, hl, hw in ((ha, la, wa), (hb, lb, wb)):
        c, s = tt.cos(h), tt.sin(h)
        for ux, uy in ((c, s), (tt.neg(s), c)):
            proj = tt.absolute(dcx * ux + dcy * uy)
            ra = _radius_t(ha, la, wa, ux, uy)
            rb = _radius_t(hb, lb, wb, ux, uy)
            gaps.append(proj - ra - rb)
    return tt.reduce_max(tt.stack(gaps, axis=0), axis=0)


def _radius_t(h, length, width, ux, uy):
    c, s = tt.cos(h), tt.sin(h)
    return tt.absolute(ux * c + uy * s) * (length / 2.0) + tt.absolute(
        ux * (tt.neg(s)) + uy * c
    ) * (width / 2.0)


def road_distance_tensor(x, y, psi, dims, segments):
    """Worst-corner signed road-edge distance as a tensor op.

    x, y, psi: (..., T); dims (length, width) floats; segments (S, 2, 2)
    constant array. Negative on-road, positive off-road. Nearest-segment
    choice and the left/right sign come from forward values (constant under
    differentiation, valid almost everywhere).
    """
    length, width = dims
    c, s = tt.cos(psi), tt.sin(psi)
    corners_x = []
    corners_y = []
    for sl, sw in ((1, 1), (1, -1), (-1, -1), (-1, 1)):
        corners_x.append(x + c * (sl * length / 2.0) + (tt.neg(s)) * (sw * width / 2.0))
        corners_y.append(y + s * (sl * length / 2.0) + c * (sw * width / 2.0))
    px = tt.stack(corners_x, axis=-1)  # (..., T, 4)
    py = tt.stack(corners_y, axis=-1)
    p0 = segments[:, 0, :]
    d = segments[:, 1, :] - p0
    seg_len2 = np.maximum((d * d).sum(-1), 1e-12)
    pxe = tt.reshape(px, px.shape + (1,))
    pye = tt.reshape(py, py.shape + (1,))
    qx = pxe - p0[:, 0]
    qy = pye - p0[:, 1]
    tpar = (qx * d[:, 0] + qy * d[:, 1]) * (1.0 / seg_len2)
    tpar = tt.minimum(tt.maximum(tpar, 0.0), 1.0)
    cx = tpar * d[:, 0] + p0[:, 0]
    cy = tpar * d[:, 1] + p0[:, 1]
    ex = pxe - cx
    ey = pye - cy
    dist = tt.sqrt(ex * ex + ey * ey + 1e-12)
    cross = d[:, 0] * qy.data - d[:, 1] * qx.data  # forward values only
    signed = tt.where(cross > 0, tt.neg(dist), dist)
    nearest = np.argmin(dist.data, axis=-1)[..., None]
    per_corner = tt.take_along(signed, nearest, axis=-1)  # (..., T, 4, 1)
    per_corner = tt.reshape(per_corner, per_corner.shape[:-1])
    return tt.reduce_max(per_corner, axis=-1)  # (..., T)


# ---------------------------------------------------------------------------
# guidance session
# ---------------------------------------------------------------------------


class GuidanceSession:
    """Binds a guidance spec to one scene and model snapshot.

    Exposes the mean-shift hooks the sampling loop calls: guided_mean for DDPM
    and guided_ddim_target for DDIM. The stochastic increment of each step is
    untouched; only the mean moves.
    """

    def __init__(
        self,
        spec: GuidanceSpec,
        enc: SceneEncoding,
        params,
        model_cfg: ModelConfig,
        norm: ActionNormalization,
        schedule: NoiseSchedule,
    ):
        self.spec = spec
        self.enc = enc.detached()
        self.params = params
        self.cfg = model_cfg
        self.norm = norm
        self.schedule = schedule
        bundle = enc.bundle
        self.dt = bundle.dt
        self.dims = bundle.agent_dims
        self.valid = bundle.agent_valid
        self.current = bundle.current_states
        self.segments = road_edge_segments_from_bundle(bundle)
        self.scales = np.array([norm.accel_scale, norm.yaw_scale])
        valid_idx = np.flatnonzero(self.valid)
        self.pairs = [(int(i), int(j)) for a, i in enumerate(valid_idx) for j in valid_idx[a + 1 :]]
        if self.segments is not None:
            from .scene import boxes_road_distance

            d0 = boxes_road_distance(
                self.current[:, :2], self.current[:, 2], self.dims[:, 0], self.dims[:, 1], self.segments
            )
            self.init_onroad = (d0 <= 0) & self.valid
        else:
            self.init_onroad = np.zeros(len(self.valid), dtype=bool)

    # -- objective ---------------------------------------------------------

    def rolled_states(self, u_leaf, k: int, use_denoiser: bool):
        """(x, y, psi, v) at action-block ends plus physical actions."""
        if use_denoiser:
            u_hat, states = denoise(u_leaf, max(k, 1), self.enc, self.params, self.cfg, self.norm)
            u_phys = u_hat * self.scales
        else:
            u_phys = u_leaf * self.scales
            init = np.broadcast_to(self.current, (u_leaf.shape[0],) + self.current.shape)
            states = rollout_tensor(init, u_phys, self.dt, self.cfg.action_repeat)
        sel = slice(self.cfg.action_repeat - 1, None, self.cfg.action_repeat)
        x, y, psi, v = (comp[..., sel] for comp in states)
        return x, y, psi, v, u_phys

    def objective(self, u_leaf, k: int) -> tt.Tensor:
        use_denoiser = self.spec.placement == "through_denoiser"
        x, y, psi, v, u_phys = self.rolled_states(u_leaf, k, use_denoiser)
        total = tt.tensor(0.0)
        for term in self.spec.terms:
            total = total + self._term_value(term, x, y, psi, u_phys) * term.weight
        return total

    def _term_agents(self, term: GuidanceTerm):
        if term.agents is None:
            return [int(i) for i in np.flatnonzero(self.valid)]
        for a in term.agents:
            if not self.valid[a]:
                raise GuidanceError(f"guidance target agent {a} is not valid")
        return [int(a) for a in term.agents]

    def _term_value(self, term, x, y, psi, u_phys):
        if term.kind == "goal":
            agents = self._term_agents(term)
            goals = np.asarray(term.goals, dtype=np.float64)
            val = tt.tensor(0.0)
            for a, g in zip(agents, goals):
                ex = tt.smooth_l1(x[:, a, -1], tt.tensor(np.full(x.shape[0], g[0])))
                ey = tt.smooth_l1(y[:, a, -1], tt.tensor(np.full(y.shape[0], g[1])))
                val = val + tt.reduce_sum(ex + ey)
            return tt.neg(val)
        if term.kind == "collision_avoid":
            return self._overlap_value(term, x, y, psi)
        if term.kind == "onroad":
            return self._onroad_value(term, x, y, psi)
        if term.kind == "rush":
            agents = self._term_agents(term)
            val = tt.tensor(0.0)
            for a in agents:
                accel = u_phys[:, a, :, 0]
                val = val + tt.reduce_sum(tt.square(tt.relu(tt.neg(accel))))
            return tt.neg(val)
        raise GuidanceError(term.kind)

    def _overlap_value(self, term, x, y, psi):
        """Sum of signed pair distances gated below the threshold; all valid
        agent pairs and block-end timesteps at once."""
        if not self.pairs:
            return tt.tensor(0.0)
        ii = np.array([p[0] for p in self.pairs])
        jj = np.array([p[1] for p in self.pairs])
        xT = tt.swap_axes(x, 0, 1)  # (A, S, T)
        yT = tt.swap_axes(y, 0, 1)
        pT = tt.swap_axes(psi, 0, 1)
        dims_i = (self.dims[ii, 0][:, None, None], self.dims[ii, 1][:, None, None])
        dims_j = (self.dims[jj, 0][:, None, None], self.dims[jj, 1][:, None, None])
        d = pair_box_gaps(xT[ii], yT[ii], pT[ii], dims_i, xT[jj], yT[jj], pT[jj], dims_j)
        gate = d.data < term.overlap_threshold  # indicator from forward values
        if not gate.any():
            return tt.tensor(0.0)
        return tt.reduce_sum(tt.masked_fill(d, ~gate, 0.0))

    def _onroad_value(self, term, x, y, psi):
        """-sum relu(d_r) over agents that start on-road."""
        if self.segments is None or not self.init_onroad.any():
            return tt.tensor(0.0)
        sel = np.flatnonzero(self.init_onroad)
        xT = tt.swap_axes(x, 0, 1)
        yT = tt.swap_axes(y, 0, 1)
        pT = tt.swap_axes(psi, 0, 1)
        dims = (self.dims[sel, 0][:, None, None], self.dims[sel, 1][:, None, None])
        d_r = road_distance_tensor(xT[sel], yT[sel], pT[sel], dims, self.segments)
        return tt.neg(tt.reduce_sum(tt.relu(d_r)))

    # -- gradient steps ------------------------------------------------------

    def gradient(self, u_np: np.ndarray, k: int) -> np.ndarray:
        leaf = tt.tensor(u_np, requires_grad=True)
        with tt.tape() as tape:
            J = self.objective(leaf, k)
            tape.backward(J)
        g = leaf.grad if leaf.grad is not None else np.zeros_like(u_np)
        if not np.all(np.isfinite(g)):
            raise GuidanceError(f"non-finite guidance gradient at k={k}")
        return np.asarray(g, dtype=np.float64)

    def guided_mean(self, u_noised, u_hat, k: int):
        mu = posterior_mean(u_noised, u_hat, k, self.schedule)
        if not self.spec.terms:
            return mu
        scale = self.spec.strength * self.schedule.sigma[k]
        if scale == 0.0:
            return mu
        for _ in range(self.spec.n_grad_steps):
            mu = mu + scale * self.gradient(mu, k)
        return mu

    def guided_ddim_target(self, u_noised, u_hat, k: int, k_prev: int):
        out = ddim_step(u_noised, u_hat, k, k_prev, self.schedule)
        if not self.spec.terms:
            return out
        scale = self.spec.strength * self.schedule.sigma[k]
        if scale == 0.0:
            return out
        for _ in range(self.spec.n_grad_steps):
            out = out + scale * self.gradient(out, max(k_prev, 1))
        return out


def road_edge_segments_from_bundle(bundle):
    """Rebuild oriented road-edge segments from the encoded polyline features.

    The bundle stores waypoints in polyline-local frames with the reference
    pose per polyline, so segments are reconstructed exactly.
    """
    from .scene import to_global_frame

    segs = []
    A = bundle.n_agents
    for i in range(len(bundle.poly_feat)):
        feat = bundle.poly_feat[i]
        valid = bundle.poly_wp_valid[i]
        if not valid.any() or feat[valid][0, 5] != 1.0:  # lane-kind one-hot: road_edge
            continue
        ref = bundle.ref_poses[A + i]
        pts = to_global_frame(feat[valid][:, :2], ref)
        if len(pts) >= 2:
            segs.append(np.stack([pts[:-1], pts[1:]], axis=1))
    if not segs:
        return None
    return np.concatenate(segs, axis=0)


# ---------------------------------------------------------------------------
# standalone guided DDPM step (spec surface; the sampling loop uses the
# session hooks directly)
# ---------------------------------------------------------------------------


def guided_step(u_noised, k, session: GuidanceSession, denoiser_fn, rng: np.random.Generator):
    u_hat = denoiser_fn(u_noised, k)
    mu = session.guided_mean(u_noised, u_hat, k)
    z = rng.standard_normal(np.shape(mu))
    return mu + session.schedule.sigma[k] * z


# ---------------------------------------------------------------------------
# conflict-prior selection
# ---------------------------------------------------------------------------


@dataclass
class ConflictPrior:
    agent: int
    mode: int
    goal: np.ndarray  # (2,) endpoint of the conflicting mode
    score: float
    first_overlap_step: int


def select_conflict_prior(
    prior_states: np.ndarray,
    probs: np.ndarray,
    dims: np.ndarray,
    ego: int,
    eps_p: float = 0.05,
    valid: np.ndarray | None = None,
) -> ConflictPrior | None:
    """Highest-scoring (agent, mode) whose rollout intersects the ego's most
    likely mode; score = probability * linear collision-time ramp. None when
    no mode conflicts (the failure case of prior-based selection)."""
    A, M, T = prior_states.shape[:3]
    if valid is None:
        valid = np.ones(A, dtype=bool)
    ego_mode = int(np.argmax(probs[ego]))
    ego_traj = prior_states[ego, ego_mode]
    best: ConflictPrior | None = None
    for i in range(A):
        if i == ego or not valid[i]:
            continue
        for j in range(M):
            if probs[i, j] <= eps_p:
                continue
            d = sat_signed_distance(
                prior_states[i, j, :, 0], prior_states[i, j, :, 1], prior_states[i, j, :, 2],
                dims[i, 0], dims[i, 1],
                ego_traj[:, 0], ego_traj[:, 1], ego_traj[:, 2],
                dims[ego, 0], dims[ego, 1],
            )
            hits = np.flatnonzero(d < 0)
            if len(hits) == 0:
                continue
            t0 = int(hits[0])
            col = (T - t0) / T
            score = float(probs[i, j] * col)
            if best is None or score > best.score:
                best = ConflictPrior(i, j, prior_states[i, j, -1, :2].copy(), score, t0)
    return best


# ---------------------------------------------------------------------------
# game-theoretic guidance (gradient descent-ascent)
# ---------------------------------------------------------------------------


class GameSession:
    """Pursuit-evasion updates on the reverse-process mean.

    The pursuer takes gradient steps shrinking the smooth-min clearance to the
    evader; the evader takes steps growing it; both are penalized for leaving
    the road. Updates touch only each agent's own action slice, gated by the
    optional per-timestep masks.
    """

    def __init__(self, game: GameSpec, enc, params, model_cfg, norm, schedule):
        self.game = game
        base_spec = GuidanceSpec(terms=[], n_grad_steps=1, strength=game.strength)
        self.session = GuidanceSession(base_spec, enc, params, model_cfg, norm, schedule)
        self.schedule = schedule
        t_f = model_cfg.t_f
        self.mask_e = np.ones(t_f) if game.evader_mask is None else np.asarray(game.evader_mask, dtype=np.float64)
        self.mask_p = np.ones(t_f) if game.pursuer_mask is None else np.asarray(game.pursuer_mask, dtype=np.float64)

    def _objective(self, leaf, k: int, role: str) -> tt.Tensor:
        g = self.game
        s = self.session
        x, y, psi, v, _ = s.rolled_states(leaf, k, g.placement == "through_denoiser")
        e, p = g.evader, g.pursuer
        d = pair_box_gaps(
            x[:, e], y[:, e], psi[:, e], (s.dims[e, 0], s.dims[e, 1]),
            x[:, p], y[:, p], psi[:, p], (s.dims[p, 0], s.dims[p, 1]),
        )
        clearance = smooth_min(tt.reshape(d, (-1,)), g.smooth_min_tau)
        agent = e if role == "evader" else p
        road = tt.reduce_sum(
            tt.relu(
                road_distance_tensor(
                    x[:, agent], y[:, agent], psi[:, agent],
                    (s.dims[agent, 0], s.dims[agent, 1]), s.segments,
                )
            )
        ) if s.segments is not None else tt.tensor(0.0)
        # evader maximizes clearance, pursuer minimizes it; both stay on-road
        sign = 1.0 if role == "evader" else -1.0
        return clearance * sign - road * g.road_weight

    def _ascend(self, mu: np.ndarray, k: int, role: str, steps: int) -> np.ndarray:
        g = self.game
        agent = g.evader if role == "evader" else g.pursuer
        mask = (self.mask_e if role == "evader" else self.mask_p)[None, :, None]
        scale = g.strength * g.sigma_scale * self.schedule.sigma[k]
        if scale == 0.0 or steps == 0:
            return mu
        for _ in range(steps):
            leaf = tt.tensor(mu, requires_grad=True)
            with tt.tape() as tape:
                tape.backward(self._objective(leaf, k, role))
            grad = leaf.grad
            if grad is None:
                return mu
            if not np.all(np.isfinite(grad)):
                raise GuidanceError(f"non-finite game gradient at k={k}")
            mu = mu.copy()
            mu[:, agent] += scale * mask * np.asarray(grad, dtype=np.float64)[:, agent]
        return mu

    def refine(self, mu: np.ndarray, k: int) -> np.ndarray:
        for _ in range(self.game.outer_steps):
            mu = self._ascend(mu, k, "evader", self.game.descent_steps)
            mu = self._ascend(mu, k, "pursuer", self.game.ascent_steps)
        return mu


def game_guided_sample(
    game: GameSpec,
    enc,
    params,
    model_cfg: ModelConfig,
    norm: ActionNormalization,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    denoiser,
    sampler: str = "ddpm",
    n_samples: int = 1,
):
    """Full reverse loop with GDA refinement at every step.

    DDPM refines the posterior mean directly. DDIM refines the clean estimate
    and re-projects with the original noise direction: intermediate noised
    targets are noise-dominated at this scale and their gradients wash out,
    while clean-plan gradients stay meaningful at every step.
    """
    session = GameSession(game, enc, params, model_cfg, norm, schedule)
    A = enc.bundle.n_agents
    shape = (n_samples, A, model_cfg.t_f, 2)
    kind, n_steps = parse_sampler(sampler)
    u = rng.standard_normal(shape)
    if kind == "ddpm":
        for k in range(schedule.k_steps, 0, -1):
            u_hat = denoiser(u, k)
            mu = posterior_mean(u, u_hat, k, schedule)
            mu = session.refine(mu, k)
            z = rng.standard_normal(shape)
            u = mu + schedule.sigma[k] * z
        return u
    import math as _math

    for k, k_prev in ddim_stride(schedule.k_steps, n_steps):
        u_hat = denoiser(u, k)
        ab_k = schedule.alpha_bar[k]
        eps_hat = (u - _math.sqrt(ab_k) * u_hat) / _math.sqrt(1.0 - ab_k)
        u_hat = session.refine(u_hat, k)
        ab_prev = schedule.alpha_bar[k_prev]
        u = _math.sqrt(ab_prev) * u_hat + _math.sqrt(1.0 - ab_prev) * eps_hat
    return u
