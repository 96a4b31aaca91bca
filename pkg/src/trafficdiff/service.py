"""HTTP + WebSocket boundary for the scenario editor.

Scenarios, marginal priors, guided generation, and live closed-loop
simulation. The model snapshot is loaded once at startup and treated as
immutable; POST /api/reload (guarded by the VBD_RELOAD_TOKEN env var) swaps it
atomically. Inference holds no shared mutable state, so concurrent requests on
one snapshot are safe.
"""

from __future__ import annotations

import asyncio
import json
import os
import threading
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Request, WebSocket, WebSocketDisconnect
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from . import tensor as tt
from .guidance import GuidanceError, GuidanceSpec
from .model import ModelBundle, encode_scene, predict_priors
from .scene import Scenario, encode_scene_features, scenario_to_json
from .simulator import ClosedLoopSim, SimConfig, compute_metrics, frame_dict

RELOAD_TOKEN_ENV = "VBD_RELOAD_TOKEN"


class ServiceError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


@dataclass
class AppState:
    bundle: ModelBundle
    scenarios: dict
    model_path: str
    sessions: dict = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock)


def load_scenarios(data_path: str) -> dict:
    from .scene import load_scenario
    from .worldgen import load_dataset

    scenarios = {}
    if os.path.isdir(data_path):
        names = sorted(
            f for f in os.listdir(data_path) if f.endswith(".json") or f.endswith(".jsonl")
        )
        paths = [os.path.join(data_path, n) for n in names]
    else:
        paths = [data_path]
    for path in paths:
        if path.endswith(".jsonl"):
            for i, sc in enumerate(load_dataset(path)):
                scenarios[f"scn-{len(scenarios):04d}"] = sc
        elif path.endswith(".json") and os.path.exists(path):
            try:
                scenarios[f"scn-{len(scenarios):04d}"] = load_scenario(path)
            except Exception:
                continue  # unrelated json files in the data dir
    return scenarios


def scenario_summary(sid: str, sc: Scenario) -> dict:
    return {
        "id": sid,
        "n_agents": len(sc.scene.agents),
        "horizon": sc.horizon,
        "dt": sc.scene.dt,
        "n_polylines": len(sc.scene.polylines),
        "n_lights": len(sc.scene.lights),
    }


def create_app(model_path: str, data_path: str, frontend_dir: str | None = None) -> FastAPI:
    state = AppState(
        bundle=ModelBundle.load(model_path),
        scenarios=load_scenarios(data_path),
        model_path=model_path,
    )
    app = FastAPI(title="trafficdiff service")
    app.state.app_state = state
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )

    @app.exception_handler(ServiceError)
    async def service_error(_req: Request, exc: ServiceError):
        return JSONResponse(
            status_code=exc.status, content={"code": exc.code, "message": exc.message}
        )

    def get_scenario(sid: str) -> Scenario:
        sc = state.scenarios.get(sid)
        if sc is None:
            raise ServiceError(404, "unknown_scenario", f"no scenario with id {sid!r}")
        return sc

    @app.get("/api/scenarios")
    def list_scenarios():
        return {
            "scenarios": [scenario_summary(sid, sc) for sid, sc in sorted(state.scenarios.items())]
        }

    @app.get("/api/scenarios/{sid}")
    def get_scenario_doc(sid: str):
        sc = get_scenario(sid)
        return json.loads(scenario_to_json(sc))

    @app.post("/api/priors")
    def priors(body: dict):
        sid = body.get("scenario_id")
        agent = body.get("agent_id")
        sc = get_scenario(sid)
        ids = [ag.id for ag in sc.scene.agents]
        if agent not in ids:
            raise ServiceError(404, "unknown_agent", f"no agent {agent} in {sid}")
        idx = ids.index(agent)
        bundle = state.bundle
        rng = np.random.default_rng(int(body.get("seed", 0)))
        feats = encode_scene_features(sc.scene, history_dropout=1.0, rng=rng)
        with tt.no_grad():
            enc = encode_scene(feats, bundle.params, bundle.model_config)
            prior = predict_priors(enc, bundle.anchors, bundle.params, bundle.model_config, bundle.norm)
        states = prior.states_numpy()[idx]  # (M, T, 4)
        probs = prior.probs.data[idx]
        modes = [
            {
                "probability": float(probs[m]),
                "goal": [float(states[m, -1, 0]), float(states[m, -1, 1])],
                "states": [[float(v) for v in row] for row in states[m]],
            }
            for m in range(states.shape[0])
        ]
        return {"agent_id": agent, "modes": modes}

    @app.post("/api/conflict_prior")
    def conflict_prior(body: dict):
        """Pick the predicted mode of a non-ego agent most likely to collide
        with the ego's most likely plan; the editor feeds its endpoint into a
        goal-guidance term."""
        from .guidance import select_conflict_prior

        sid = body.get("scenario_id")
        ego = body.get("ego_agent")
        sc = get_scenario(sid)
        ids = [ag.id for ag in sc.scene.agents]
        if ego not in ids:
            raise ServiceError(404, "unknown_agent", f"no agent {ego} in {sid}")
        bundle = state.bundle
        rng = np.random.default_rng(int(body.get("seed", 0)))
        feats = encode_scene_features(sc.scene, history_dropout=1.0, rng=rng)
        with tt.no_grad():
            enc = encode_scene(feats, bundle.params, bundle.model_config)
            prior = predict_priors(enc, bundle.anchors, bundle.params, bundle.model_config, bundle.norm)
        pick = select_conflict_prior(
            prior.states_numpy(),
            prior.probs.data,
            feats.agent_dims,
            ego=ids.index(ego),
            eps_p=float(body.get("prior_prob_threshold", 0.05)),
            valid=feats.agent_valid,
        )
        if pick is None:
            return {"found": False}
        return {
            "found": True,
            "agent_id": ids[pick.agent],
            "mode": pick.mode,
            "goal": [float(pick.goal[0]), float(pick.goal[1])],
            "score": pick.score,
            "first_overlap_step": pick.first_overlap_step,
        }

    @app.post("/api/generate")
    def generate(body: dict):
        sid = body.get("scenario_id")
        sc = get_scenario(sid)
        n_samples = int(body.get("n_samples", 1))
        if n_samples < 1:
            raise ServiceError(400, "bad_request", "n_samples must be >= 1")
        sampler = body.get("sampler", "ddim:5")
        seed = int(body.get("seed", 0))
        spec = None
        if body.get("guidance"):
            try:
                spec = GuidanceSpec(**body["guidance"])
            except (GuidanceError, TypeError) as e:
                raise ServiceError(400, "bad_guidance", str(e))
        try:
            return _generate_payload(state.bundle, sc, spec, sampler, n_samples, seed)
        except GuidanceError as e:
            raise ServiceError(500, "generation_failed", str(e))

    @app.post("/api/reload")
    def reload(body: dict, request: Request):
        expected = os.environ.get(RELOAD_TOKEN_ENV)
        token = request.headers.get("x-reload-token")
        if not expected or token != expected:
            raise ServiceError(403, "forbidden", "missing or invalid reload token")
        path = body.get("model_path", state.model_path)
        if not os.path.exists(path):
            raise ServiceError(404, "missing_model", path)
        with state.lock:
            state.bundle = ModelBundle.load(path)
            state.model_path = path
        return {"ok": True, "model_path": path}

    @app.websocket("/api/simulate")
    async def ws_simulate(ws: WebSocket):
        await ws.accept()
        session_id = uuid.uuid4().hex
        sim: ClosedLoopSim | None = None
        paused = False
        rate_hz = 10.0
        max_speed = False
        with state.lock:
            state.sessions[session_id] = {"state": "idle", "step": 0}
        try:
            while True:
                if sim is None or paused:
                    msg = json.loads(await ws.receive_text())
                else:
                    # poll for commands between frames without blocking playback
                    try:
                        msg = json.loads(
                            await asyncio.wait_for(ws.receive_text(), timeout=0.0005)
                        )
                    except asyncio.TimeoutError:
                        msg = None
                if msg is not None:
                    cmd = msg.get("cmd")
                    if cmd == "start":
                        sc = state.scenarios.get(msg.get("scenario_id"))
                        if sc is None:
                            await ws.send_text(json.dumps({"type": "error", "code": "unknown_scenario"}))
                            continue
                        cfg_in = msg.get("config", {})
                        rate_hz = float(cfg_in.pop("rate_hz", 10.0))
                        max_speed = bool(cfg_in.pop("max_speed", False))
                        try:
                            cfg = SimConfig(**cfg_in)
                        except Exception as e:
                            await ws.send_text(json.dumps({"type": "error", "code": "bad_config", "message": str(e)}))
                            continue
                        sim = ClosedLoopSim(sc, state.bundle, cfg)
                        paused = False
                        await ws.send_text(json.dumps({"type": "started", "session": session_id, "frame": sim.frames[0]}))
                    elif cmd == "pause":
                        paused = True
                        await ws.send_text(json.dumps({"type": "paused"}))
                    elif cmd == "resume":
                        paused = False
                        await ws.send_text(json.dumps({"type": "resumed"}))
                    elif cmd == "set_guidance":
                        if sim is not None:
                            try:
                                spec = GuidanceSpec(**msg["spec"]) if msg.get("spec") else None
                                sim.set_guidance(spec)
                                await ws.send_text(json.dumps({"type": "guidance_set"}))
                            except (GuidanceError, TypeError) as e:
                                await ws.send_text(json.dumps({"type": "error", "code": "bad_guidance", "message": str(e)}))
                    elif cmd == "set_ego_planner":
                        if sim is not None:
                            sim.set_ego_planner(msg.get("planner", "model"))
                            await ws.send_text(json.dumps({"type": "ego_planner_set"}))
                    elif cmd == "stop":
                        break
                if sim is not None and not paused and not sim.done:
                    frame = await asyncio.to_thread(sim.step)
                    with state.lock:
                        state.sessions[session_id] = {"state": "running", "step": sim.t}
                    await ws.send_text(json.dumps({"type": "frame", "frame": frame}))
                    if sim.done:
                        await ws.send_text(json.dumps({"type": "done", "steps": sim.t}))
                        with state.lock:
                            state.sessions[session_id] = {"state": "done", "step": sim.t}
                        sim = None
                    elif not max_speed:
                        await asyncio.sleep(1.0 / rate_hz)
        except WebSocketDisconnect:
            pass
        finally:
            with state.lock:
                state.sessions.pop(session_id, None)

    if frontend_dir and os.path.isdir(frontend_dir):
        app.mount("/", StaticFiles(directory=frontend_dir, html=True), name="frontend")
    return app


def _generate_payload(bundle, sc, spec, sampler, n_samples, seed) -> dict:
    from .simulator import generate_open_loop

    states = generate_open_loop(
        sc, bundle, sampler=sampler, n_samples=n_samples, seed=seed, guidance=spec
    )
    ids = [ag.id for ag in sc.scene.agents]
    rollouts = [
        {"frames": [frame_dict(t, states[s, :, t], ids) for t in range(states.shape[2])]}
        for s in range(n_samples)
    ]
    payload = {"rollouts": rollouts}
    if states.shape[2] == sc.ground_truth.shape[1]:
        payload["metrics"] = compute_metrics(
            [states[s] for s in range(n_samples)], sc
        ).to_json()
    return payload
