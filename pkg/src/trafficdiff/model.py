"""Scene encoder, joint denoiser, and marginal behavior predictor.

The encoder turns the per-scene feature bundle into tokens with query-centric
attention (relative-pose edge embeddings added to keys and values). The
denoiser maps noised normalized action sequences to clean ones, attending
across agents per timestep, causally across time, and to the scene tokens.
The predictor decodes anchor-conditioned multimodal trajectories per agent.
All rollouts go through the differentiable unicycle layer so every output
trajectory is kinematically feasible by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as tt
from .dynamics import ActionNormalization
from .scene import FeatureBundle, AGENT_FEATURE_DIM, WAYPOINT_FEATURE_DIM, LIGHT_FEATURE_DIM
from .diffusion import DiffusionConfig

POS_SCALE = 0.1  # meters -> network units for positions, velocities, extents


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    heads: int = 4
    encoder_layers: int = 2
    predictor_layers: int = 2
    denoiser_blocks: int = 2
    modes: int = 8
    a_max: int = 8
    t_f: int = 40
    action_repeat: int = 2
    k_steps: int = 50
    t_h: int = 11
    ffn_mult: int = 4

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if self.modes < 1:
            raise ValueError("modes must be >= 1")


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------


def _add_linear(params, rng, name, fan_in, fan_out):
    w = rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out))
    params[f"{name}/w"] = tt.tensor(w, requires_grad=True)
    params[f"{name}/b"] = tt.zeros(fan_out, requires_grad=True)


def _add_ln(params, name, dim):
    params[f"{name}/g"] = tt.tensor(np.ones(dim), requires_grad=True)
    params[f"{name}/b"] = tt.zeros(dim, requires_grad=True)


def _add_attention(params, rng, name, dim):
    for part in ("q", "k", "v", "o"):
        _add_linear(params, rng, f"{name}/{part}", dim, dim)
    _add_ln(params, f"{name}/ln", dim)


def _add_ffn(params, rng, name, dim, mult):
    _add_linear(params, rng, f"{name}/0", dim, dim * mult)
    _add_linear(params, rng, f"{name}/1", dim * mult, dim)
    _add_ln(params, f"{name}/ln", dim)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict:
    D = cfg.embed_dim
    params: dict[str, tt.Tensor] = {}
    params["type_embed"] = tt.tensor(rng.normal(0, 0.02, (3, D)), requires_grad=True)
    for name, fan_in in (("agent_mlp", AGENT_FEATURE_DIM), ("poly_mlp", WAYPOINT_FEATURE_DIM), ("light_mlp", LIGHT_FEATURE_DIM)):
        _add_linear(params, rng, f"{name}/0", fan_in, D)
        _add_linear(params, rng, f"{name}/1", D, D)
    _add_linear(params, rng, "edge_mlp/0", 4, D)
    _add_linear(params, rng, "edge_mlp/1", D, D)
    for i in range(cfg.encoder_layers):
        _add_attention(params, rng, f"enc{i}/attn", D)
        _add_ffn(params, rng, f"enc{i}/ffn", D, cfg.ffn_mult)
    # denoiser
    _add_linear(params, rng, "den/state_mlp/0", 5, D)
    _add_linear(params, rng, "den/state_mlp/1", D, D)
    _add_linear(params, rng, "den/noise_mlp/0", D, D)
    _add_linear(params, rng, "den/noise_mlp/1", D, D)
    params["den/temporal"] = tt.tensor(rng.normal(0, 0.02, (cfg.t_f, D)), requires_grad=True)
    for i in range(cfg.denoiser_blocks):
        _add_attention(params, rng, f"den{i}/agent", D)
        _add_attention(params, rng, f"den{i}/time", D)
        _add_attention(params, rng, f"den{i}/cross", D)
        _add_ffn(params, rng, f"den{i}/ffn", D, cfg.ffn_mult)
    _add_linear(params, rng, "den/head/0", D, D)
    _add_linear(params, rng, "den/head/1", D, 2)
    # predictor
    _add_linear(params, rng, "pred/anchor_mlp/0", 2, D)
    _add_linear(params, rng, "pred/anchor_mlp/1", D, D)
    for i in range(cfg.predictor_layers):
        _add_attention(params, rng, f"pred{i}/cross", D)
        _add_ffn(params, rng, f"pred{i}/ffn", D, cfg.ffn_mult)
    _add_linear(params, rng, "pred/head/0", D, D)
    _add_linear(params, rng, "pred/head/1", D, cfg.t_f * 2)
    _add_linear(params, rng, "pred/score/0", D, D)
    _add_linear(params, rng, "pred/score/1", D, 1)
    return params


def _linear(params, name, x):
    return x @ params[f"{name}/w"] + params[f"{name}/b"]


def _mlp(params, name, x):
    return _linear(params, f"{name}/1", tt.relu(_linear(params, f"{name}/0", x)))


def _ln(params, name, x):
    return tt.layer_norm(x, params[f"{name}/g"], params[f"{name}/b"])


def predictor_param_names(params) -> list[str]:
    return [n for n in params if n.startswith("pred")]


# ---------------------------------------------------------------------------
# differentiable unicycle rollout
# ---------------------------------------------------------------------------


def rollout_tensor(init, actions, dt: float, action_repeat: int = 1):
    """Differentiable rollout of physical actions.

    init (..., 5) [x, y, psi, vx, vy]; actions (..., T_f, 2) expanded by
    ``action_repeat``. Returns (x, y, psi, v) each (..., T) for substeps
    t = 1..T with psi left unwrapped (cos/sin are unaffected; callers compare
    against unwrapped ground truth).
    """
    init_np = init.data if isinstance(init, tt.Tensor) else np.asarray(init)
    if action_repeat > 1:
        tf = actions.shape[-2]
        lead = actions.shape[:-2]
        a4 = tt.reshape(actions, lead + (tf, 1, 2))
        a4 = a4 * np.ones((1,) * len(lead) + (1, action_repeat, 1), dtype=init_np.dtype)
        actions = tt.reshape(a4, lead + (tf * action_repeat, 2))
    T = actions.shape[-2]
    lead = actions.shape[:-2]
    accel = actions[..., 0]
    yaw = actions[..., 1]
    x0 = np.broadcast_to(init_np[..., 0], lead)
    y0 = np.broadcast_to(init_np[..., 1], lead)
    psi0 = np.broadcast_to(init_np[..., 2], lead)
    vx0 = np.broadcast_to(init_np[..., 3], lead)
    vy0 = np.broadcast_to(init_np[..., 4], lead)
    v0 = np.hypot(vx0, vy0)

    v = tt.speed_scan(tt.tensor(v0.copy()), accel * dt)  # (..., T), t = 1..T
    psi = tt.cumsum(yaw * dt, axis=-1) + psi0[..., None]
    vx = v * tt.cos(psi)
    vy = v * tt.sin(psi)
    vx_seq = tt.concat([tt.tensor(vx0[..., None].copy()), vx[..., :-1]], axis=-1)
    vy_seq = tt.concat([tt.tensor(vy0[..., None].copy()), vy[..., :-1]], axis=-1)
    x = tt.cumsum(vx_seq, axis=-1) * dt + x0[..., None]
    y = tt.cumsum(vy_seq, axis=-1) * dt + y0[..., None]
    return x, y, psi, v


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def _split_heads(x, heads):
    """(..., N, D) -> (..., N, H, dh)"""
    shape = x.shape[:-1] + (heads, x.shape[-1] // heads)
    return tt.reshape(x, shape)


def _merge_heads(x):
    shape = x.shape[:-2] + (x.shape[-2] * x.shape[-1],)
    return tt.reshape(x, shape)


def qca_attention(queries, keys, values, edge_embeddings, mask, heads: int = 1):
    """Query-centric attention over one token axis.

    queries (Nq, D), keys/values (Nk, D), edge_embeddings (Nq, Nk, D) added to
    keys and values per pair, mask (Nk,) or (Nq, Nk) with True = attend.
    """
    D = queries.shape[-1]
    dh = D // heads
    q = _split_heads(queries, heads)
    k = _split_heads(keys, heads)
    v = _split_heads(values, heads)
    e = tt.reshape(edge_embeddings, edge_embeddings.shape[:-1] + (heads, dh))
    scale = 1.0 / math.sqrt(dh)
    scores = tt.einsum("ihd,jhd->ihj", q, k) + tt.einsum("ihd,ijhd->ihj", q, e)
    scores = scores * scale
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        bad = ~mask[None, None, :]
    else:
        bad = ~mask[:, None, :]
    scores = tt.masked_fill(scores, np.broadcast_to(bad, scores.shape), -1e9)
    attn = tt.softmax(scores, axis=-1)
    out = tt.einsum("ihj,jhd->ihd", attn, v) + tt.einsum("ihj,ijhd->ihd", attn, e)
    return _merge_heads(out)


# ---------------------------------------------------------------------------
# scene encoder
# ---------------------------------------------------------------------------


@dataclass
class SceneEncoding:
    tokens: tt.Tensor  # (N, D)
    edges: tt.Tensor  # (N, N, D)
    bundle: FeatureBundle

    @property
    def n_agents(self) -> int:
        return self.bundle.n_agents

    def detached(self) -> "SceneEncoding":
        return SceneEncoding(self.tokens.detach(), self.edges.detach(), self.bundle)


def _scale_agent_features(feat: np.ndarray) -> np.ndarray:
    out = feat.copy()
    out[..., 0:2] *= POS_SCALE
    out[..., 4:8] *= POS_SCALE  # velocities and box extents
    return out


def _scale_waypoint_features(feat: np.ndarray) -> np.ndarray:
    out = feat.copy()
    out[..., 0:2] *= POS_SCALE
    return out


def edge_features(rel_pose: np.ndarray) -> np.ndarray:
    """(..., 3) relative pose -> (..., 4) network features."""
    return np.concatenate(
        [
            rel_pose[..., :2] * POS_SCALE,
            np.cos(rel_pose[..., 2:3]),
            np.sin(rel_pose[..., 2:3]),
        ],
        axis=-1,
    )


def encode_scene(bundle: FeatureBundle, params, cfg: ModelConfig) -> SceneEncoding:
    D = cfg.embed_dim
    A = bundle.n_agents
    L = len(bundle.poly_feat)
    G = len(bundle.light_feat)

    agent_steps = _mlp(params, "agent_mlp", tt.tensor(_scale_agent_features(bundle.agent_feat)))
    step_mask = bundle.agent_step_valid[..., None].astype(agent_steps.data.dtype)
    counts = np.maximum(bundle.agent_step_valid.sum(axis=1, keepdims=True), 1.0)
    agent_tokens = tt.reduce_sum(agent_steps * step_mask, axis=1) * (1.0 / counts)

    parts = [agent_tokens]
    if L:
        wp = _mlp(params, "poly_mlp", tt.tensor(_scale_waypoint_features(bundle.poly_feat)))
        wp = tt.masked_fill(wp, ~bundle.poly_wp_valid[..., None], -1e9)
        parts.append(tt.reduce_max(wp, axis=1))
    if G:
        parts.append(_mlp(params, "light_mlp", tt.tensor(bundle.light_feat)))
    tokens = tt.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    type_idx = np.concatenate([np.zeros(A, int), np.ones(L, int), np.full(G, 2)])
    tokens = tokens + tt.embedding_lookup(params["type_embed"], type_idx)

    edges = _mlp(params, "edge_mlp", tt.tensor(edge_features(bundle.rel_pose)))
    valid = bundle.token_valid
    for i in range(cfg.encoder_layers):
        h = _ln(params, f"enc{i}/attn/ln", tokens)
        attn = qca_attention(
            _linear(params, f"enc{i}/attn/q", h),
            _linear(params, f"enc{i}/attn/k", h),
            _linear(params, f"enc{i}/attn/v", h),
            edges,
            valid,
            cfg.heads,
        )
        tokens = tokens + _linear(params, f"enc{i}/attn/o", attn)
        tokens = tokens + _mlp(params, f"enc{i}/ffn", _ln(params, f"enc{i}/ffn/ln", tokens))
    return SceneEncoding(tokens, edges, bundle)


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------


def sinusoidal_embedding(k: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = k * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def _localized_block_states(x, y, psi, v, bundle: FeatureBundle, action_repeat: int):
    """States at action-block ends, in each agent's current frame, scaled."""
    sel = slice(action_repeat - 1, None, action_repeat)
    xs, ys, ps, vs = x[..., sel], y[..., sel], psi[..., sel], v[..., sel]
    cur = bundle.current_states
    cx = cur[:, 0][:, None]
    cy = cur[:, 1][:, None]
    cpsi = cur[:, 2][:, None]
    c, s = np.cos(cur[:, 2])[:, None], np.sin(cur[:, 2])[:, None]
    dx = xs - cx
    dy = ys - cy
    xl = dx * c + dy * s
    yl = dx * (-s) + dy * c
    dpsi = ps - cpsi
    feats = tt.stack(
        [xl * POS_SCALE, yl * POS_SCALE, tt.cos(dpsi), tt.sin(dpsi), vs * POS_SCALE], axis=-1
    )
    return feats


def _attention_site(params, name, q_in, kv_in, edges, mask, heads, score_spec, out_spec, edge_q_spec, edge_o_spec):
    """One attention site parameterized by einsum specs."""
    dh = q_in.shape[-1] // heads
    q = _split_heads(_linear(params, f"{name}/q", q_in), heads)
    k = _split_heads(_linear(params, f"{name}/k", kv_in), heads)
    v = _split_heads(_linear(params, f"{name}/v", kv_in), heads)
    scale = 1.0 / math.sqrt(dh)
    scores = tt.einsum(score_spec, q, k)
    if edges is not None:
        scores = scores + tt.einsum(edge_q_spec, q, edges)
    scores = scores * scale
    if mask is not None:
        scores = tt.masked_fill(scores, np.broadcast_to(mask, scores.shape), -1e9)
    attn = tt.softmax(scores, axis=-1)
    out = tt.einsum(out_spec, attn, v)
    if edges is not None:
        out = out + tt.einsum(edge_o_spec, attn, edges)
    return _linear(params, f"{name}/o", _merge_heads(out))


def denoise(u_noised, k: int, enc: SceneEncoding, params, cfg: ModelConfig, norm: ActionNormalization):
    """Predict clean normalized actions from noised ones at level k.

    u_noised: (S, A, T_f, 2) normalized actions (Tensor or array). Returns
    (u_hat, states) where states = (x, y, psi, v) tensors over all T substeps
    of the rollout of u_hat.
    """
    if not 1 <= k <= cfg.k_steps:
        raise ValueError(f"noise level k={k} outside [1, {cfg.k_steps}]")
    if not isinstance(u_noised, tt.Tensor):
        u_noised = tt.tensor(u_noised)
    if u_noised.ndim != 4:
        raise ValueError(f"u_noised must be (S, A, T_f, 2), got {u_noised.shape}")
    bundle = enc.bundle
    A = bundle.n_agents
    S = u_noised.shape[0]
    dt = bundle.dt
    scales = np.array([norm.accel_scale, norm.yaw_scale])

    u_phys = u_noised * scales
    init = np.broadcast_to(bundle.current_states, (S,) + bundle.current_states.shape)
    x, y, psi, v = rollout_tensor(init, u_phys, dt, action_repeat=cfg.action_repeat)
    feats = _localized_block_states(x, y, psi, v, bundle, cfg.action_repeat)
    h = _mlp(params, "den/state_mlp", feats)  # (S, A, T_f, D)

    noise_emb = _mlp(params, "den/noise_mlp", tt.tensor(sinusoidal_embedding(k, cfg.embed_dim)))
    h = h + noise_emb + params["den/temporal"]

    agent_edges = _split_heads(enc.edges[:A, :A], cfg.heads)  # (A, B, H, dh)
    token_edges = _split_heads(enc.edges[:A, :], cfg.heads)  # (A, N, H, dh)
    agent_bad = ~bundle.agent_valid  # keys on the agent axis
    token_bad = ~bundle.token_valid
    T_f = cfg.t_f
    causal_bad = np.triu(np.ones((T_f, T_f), dtype=bool), 1)  # future steps masked

    for i in range(cfg.denoiser_blocks):
        # cross-agent attention at each timestep
        q_in = _ln(params, f"den{i}/agent/ln", h)
        h = h + _attention_site(
            params, f"den{i}/agent", q_in, q_in, agent_edges,
            agent_bad[None, None, None, None, :],
            cfg.heads, "sathd,sbthd->sathb", "sathb,sbthd->sathd",
            "sathd,abhd->sathb", "sathb,abhd->sathd",
        )
        # causal attention over time within each agent
        q_in = _ln(params, f"den{i}/time/ln", h)
        h = h + _attention_site(
            params, f"den{i}/time", q_in, q_in, None,
            causal_bad[None, None, None, :, :],
            cfg.heads, "sathd,sauhd->sahtu", "sahtu,sauhd->sathd", None, None,
        )
        # cross attention to the scene tokens
        q_in = _ln(params, f"den{i}/cross/ln", h)
        h = h + _attention_site(
            params, f"den{i}/cross", q_in, enc.tokens, token_edges,
            token_bad[None, None, None, None, :],
            cfg.heads, "sathd,nhd->sathn", "sathn,nhd->sathd",
            "sathd,anhd->sathn", "sathn,anhd->sathd",
        )
        h = h + _mlp(params, f"den{i}/ffn", _ln(params, f"den{i}/ffn/ln", h))

    u_hat = _mlp(params, "den/head", h)  # (S, A, T_f, 2) normalized
    states = rollout_tensor(init, u_hat * scales, dt, action_repeat=cfg.action_repeat)
    return u_hat, states


def denoiser_fn(enc: SceneEncoding, params, cfg: ModelConfig, norm: ActionNormalization):
    """Plain-array denoiser closure for the sampling loop (no gradients)."""
    enc = enc.detached()

    def fn(u_noised: np.ndarray, k: int) -> np.ndarray:
        with tt.no_grad():
            u_hat, _ = denoise(u_noised, k, enc, params, cfg, norm)
        return u_hat.data.copy()

    return fn


# ---------------------------------------------------------------------------
# behavior predictor
# ---------------------------------------------------------------------------


@dataclass
class PriorOutput:
    actions: tt.Tensor  # (A, M, T_f, 2) normalized
    states: tuple  # (x, y, psi, v) tensors, each (A, M, T)
    logits: tt.Tensor  # (A, M)
    probs: tt.Tensor  # (A, M)

    def states_numpy(self) -> np.ndarray:
        """(A, M, T, 4) stacked [x, y, psi, v]."""
        return np.stack([s.data for s in self.states], axis=-1)


def anchors_for_bundle(anchors: dict, bundle: FeatureBundle, modes: int) -> np.ndarray:
    """(A, M, 2) anchor endpoints per agent in its local frame."""
    out = np.zeros((bundle.n_agents, modes, 2))
    for i, kind in enumerate(bundle.agent_kinds):
        key = kind.value if kind.value in anchors else "vehicle"
        out[i] = anchors[key]
    return out


def predict_priors(enc: SceneEncoding, anchors: dict, params, cfg: ModelConfig, norm: ActionNormalization) -> PriorOutput:
    bundle = enc.bundle
    A = bundle.n_agents
    anchor_xy = anchors_for_bundle(anchors, bundle, cfg.modes)
    q = _mlp(params, "pred/anchor_mlp", tt.tensor(anchor_xy * POS_SCALE))
    agent_tokens = enc.tokens[:A]
    q = q + tt.reshape(agent_tokens, (A, 1, cfg.embed_dim))

    token_edges = _split_heads(enc.edges[:A, :], cfg.heads)
    token_bad = ~bundle.token_valid
    for i in range(cfg.predictor_layers):
        q_in = _ln(params, f"pred{i}/cross/ln", q)
        q = q + _attention_site(
            params, f"pred{i}/cross", q_in, enc.tokens, token_edges,
            token_bad[None, None, None, :],
            cfg.heads, "amhd,nhd->amhn", "amhn,nhd->amhd",
            "amhd,anhd->amhn", "amhn,anhd->amhd",
        )
        q = q + _mlp(params, f"pred{i}/ffn", _ln(params, f"pred{i}/ffn/ln", q))

    actions = tt.reshape(_mlp(params, "pred/head", q), (A, cfg.modes, cfg.t_f, 2))
    scales = np.array([norm.accel_scale, norm.yaw_scale])
    init = np.broadcast_to(bundle.current_states[:, None, :], (A, cfg.modes, 5))
    states = rollout_tensor(init, actions * scales, bundle.dt, action_repeat=cfg.action_repeat)
    logits = tt.reshape(_mlp(params, "pred/score", q), (A, cfg.modes))
    probs = tt.softmax(logits, axis=-1)
    return PriorOutput(actions, states, logits, probs)


# ---------------------------------------------------------------------------
# anchors via seeded k-means++
# ---------------------------------------------------------------------------


def kmeans(points: np.ndarray, k: int, seed: int, iters: int = 50) -> np.ndarray:
    """k-means with k-means++ initialization; deterministic per seed."""
    rng = np.random.default_rng(seed)
    n = len(points)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(-1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 1e-12:
            centers[i:] = centers[0]
            break
        probs = d2 / total
        centers[i] = points[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((points - centers[i]) ** 2).sum(-1))
    for _ in range(iters):
        dists = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        assign = np.argmin(dists, axis=1)
        new_centers = centers.copy()
        for i in range(k):
            sel = points[assign == i]
            if len(sel):
                new_centers[i] = sel.mean(axis=0)
        if np.allclose(new_centers, centers):
            break
        centers = new_centers
    return centers


class AnchorError(ValueError):
    pass


def build_anchors(scenarios, modes: int, seed: int = 0) -> dict:
    """Endpoint anchors per agent kind from ground-truth trajectories.

    Endpoints are final (x, y) positions in each agent's current local frame.
    """
    from .scene import to_local_frame

    endpoints: dict[str, list] = {}
    for sc in scenarios:
        for i, ag in enumerate(sc.scene.agents):
            if not ag.valid_now:
                continue
            end = sc.ground_truth[i, -1, :2]
            local = to_local_frame(end, ag.current_pose)
            endpoints.setdefault(ag.kind.value, []).append(local)
    anchors = {}
    insufficient = [k for k, v in endpoints.items() if len(v) < modes]
    if insufficient:
        raise AnchorError(f"insufficient endpoint samples for kinds: {insufficient}")
    for kind, pts in endpoints.items():
        anchors[kind] = kmeans(np.asarray(pts), modes, seed)
    return anchors


# ---------------------------------------------------------------------------
# model bundle (params + anchors + configs) on the checkpoint format
# ---------------------------------------------------------------------------


@dataclass
class ModelBundle:
    params: dict
    anchors: dict
    model_config: ModelConfig
    diffusion_config: DiffusionConfig
    schedule_kind: str = "log"
    norm: ActionNormalization = field(default_factory=ActionNormalization)

    def save(self, path):
        tensors = dict(self.params)
        for kind, arr in self.anchors.items():
            tensors[f"anchors/{kind}"] = tt.tensor(arr)
        meta = {
            "model_config": asdict(self.model_config),
            "diffusion_config": asdict(self.diffusion_config),
            "schedule_kind": self.schedule_kind,
            "norm": {"accel_scale": self.norm.accel_scale, "yaw_scale": self.norm.yaw_scale},
            "anchor_kinds": sorted(self.anchors.keys()),
        }
        tt.save_checkpoint(path, tensors, meta)

    @staticmethod
    def load(path) -> "ModelBundle":
        tensors, meta = tt.load_checkpoint(path)
        anchors = {}
        params = {}
        for name, arr in tensors.items():
            if name.startswith("anchors/"):
                anchors[name.split("/", 1)[1]] = arr
            else:
                params[name] = tt.tensor(arr, requires_grad=True)
        return ModelBundle(
            params=params,
            anchors=anchors,
            model_config=ModelConfig(**meta["model_config"]),
            diffusion_config=DiffusionConfig(**meta["diffusion_config"]),
            schedule_kind=meta["schedule_kind"],
            norm=ActionNormalization(**meta["norm"]),
        )
