"""Operator command line: worldgen | train | simulate | evaluate | generate |
anchors | schedule-dump | serve.

Every subcommand takes --seed and reproduces byte-identical outputs for
identical inputs; the run manifest written beside outputs carries timings and
is the one product excluded from that guarantee. VBD_DATA_DIR provides the
default data root.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import subprocess
import sys
import time

import numpy as np

DATA_DIR_ENV = "VBD_DATA_DIR"

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4


class ConfigError(ValueError):
    pass


def _data_root() -> str:
    return os.environ.get(DATA_DIR_ENV, ".")


def _build_version() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
            cwd=os.path.dirname(os.path.abspath(__file__)),
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except Exception:
        pass
    return "unknown"


def write_manifest(out_dir, command: str, args: dict, inputs, outputs, started: float, seed):
    manifest = {
        "command": command,
        "args": {k: v for k, v in sorted(args.items()) if k != "func"},
        "config_hash": hashlib.sha256(
            json.dumps(args, sort_keys=True, default=str).encode()
        ).hexdigest(),
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "duration_s": time.monotonic() - started,
        "build": _build_version(),
    }
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "run_manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=str)
        f.write("\n")
    return path


def _load_json_file(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed JSON in {path}: {e}") from e


def _load_scenarios(path):
    from .scene import load_scenario
    from .worldgen import load_dataset

    if not os.path.exists(path):
        raise FileNotFoundError(path)
    if path.endswith(".jsonl"):
        return load_dataset(path)
    return [load_scenario(path)]


def _load_guidance(path):
    from .guidance import GuidanceSpec

    if path is None:
        return None
    return GuidanceSpec.from_json(json.dumps(_load_json_file(path)))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_worldgen(args) -> int:
    from .worldgen import WorldgenConfig, build_dataset

    started = time.monotonic()
    out = args.out
    base = WorldgenConfig(
        map_kind=args.map_kind, n_agents=args.agents, horizon=args.horizon, dt=args.dt,
        tight_spacing=args.tight,
    )
    index = build_dataset(out, master_seed=args.seed, count=args.count, base=base, jobs=args.jobs)
    write_manifest(os.path.dirname(out) or ".", "worldgen", vars(args), [], [out, out + ".index.json"], started, args.seed)
    print(json.dumps(index["stats"], sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    from .diffusion import DiffusionConfig
    from .model import ModelConfig
    from .training import TrainConfig, train

    started = time.monotonic()
    scenarios = _load_scenarios(args.data)
    overrides = _load_json_file(args.config) if args.config else {}
    try:
        model_cfg = ModelConfig(**overrides.get("model", {}))
        diff_cfg = DiffusionConfig(**overrides.get("diffusion", {}))
        train_kwargs = overrides.get("train", {})
        train_kwargs.setdefault("seed", args.seed)
        if args.epochs is not None:
            train_kwargs["epochs"] = args.epochs
        if args.loss_target is not None:
            train_kwargs["loss_target"] = args.loss_target
        train_cfg = TrainConfig(**train_kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    bundle, report = train(
        scenarios, model_cfg, train_cfg, diff_cfg, args.out, log=lambda m: print(m, flush=True)
    )
    outputs = [os.path.join(args.out, "model.ckpt"), os.path.join(args.out, "training_report.json")]
    write_manifest(args.out, "train", vars(args), [args.data], outputs, started, args.seed)
    print(json.dumps({"final_val_ade": report.final_val_ade, "baseline_val_ade": report.baseline_val_ade}))
    return EXIT_OK


def cmd_anchors(args) -> int:
    from .model import build_anchors

    started = time.monotonic()
    scenarios = _load_scenarios(args.data)
    anchors = build_anchors(scenarios, args.modes, seed=args.seed)
    doc = {k: v.tolist() for k, v in sorted(anchors.items())}
    with open(args.out, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    write_manifest(os.path.dirname(args.out) or ".", "anchors", vars(args), [args.data], [args.out], started, args.seed)
    return EXIT_OK


def cmd_schedule_dump(args) -> int:
    from .diffusion import DiffusionConfig, build_schedule

    started = time.monotonic()
    cfg = DiffusionConfig(k_steps=args.K)
    schedule = build_schedule(args.kind, cfg)
    text = schedule.to_csv()
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
        write_manifest(os.path.dirname(args.out) or ".", "schedule-dump", vars(args), [], [args.out], started, args.seed)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .model import ModelBundle
    from .simulator import SimConfig, compute_metrics, simulate, write_frame_log

    started = time.monotonic()
    scenarios = _load_scenarios(args.scenario)
    bundle = ModelBundle.load(_require(args.model))
    os.makedirs(args.out, exist_ok=True)
    guidance = _load_guidance(args.guidance)
    outputs = []
    all_reports = []
    for si, scenario in enumerate(scenarios):
        rollouts = []
        for r in range(args.rollouts):
            cfg = SimConfig(
                total_steps=args.steps or scenario.horizon,
                replan_interval=args.replan,
                sampler=args.sampler,
                guidance=guidance,
                ego_planner=args.ego_planner,
                seed=args.seed + 1000 * si + r,
            )
            result = simulate(scenario, bundle, cfg)
            rollouts.append(result.states)
            path = os.path.join(args.out, f"scenario{si:04d}_rollout{r:02d}.jsonl")
            write_frame_log(path, result.frames)
            outputs.append(path)
        if rollouts[0].shape[1] == scenario.ground_truth.shape[1]:
            all_reports.append(compute_metrics(rollouts, scenario).to_json())
    metrics_path = os.path.join(args.out, "metrics.json")
    with open(metrics_path, "w") as f:
        json.dump(all_reports, f, indent=2, sort_keys=True)
        f.write("\n")
    outputs.append(metrics_path)
    write_manifest(args.out, "simulate", vars(args), [args.scenario, args.model], outputs, started, args.seed)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .model import ModelBundle
    from .simulator import SimConfig, compute_metrics, simulate

    started = time.monotonic()
    scenarios = _load_scenarios(args.data)
    bundle = None
    if args.agent_policy == "model":
        bundle = ModelBundle.load(_require(args.model))
    else:
        bundle = _dummy_bundle()
    os.makedirs(args.out, exist_ok=True)

    def evaluate_scene(si_scenario):
        si, scenario = si_scenario
        rollouts = []
        for r in range(args.rollouts):
            cfg = SimConfig(
                total_steps=scenario.horizon,
                replan_interval=args.replan,
                sampler=args.sampler,
                ego_planner=args.ego_planner,
                agent_policy=args.agent_policy,
                seed=args.seed + 1000 * si + r,
            )
            rollouts.append(simulate(scenario, bundle, cfg).states)
        return compute_metrics(rollouts, scenario)

    if args.jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            reports = list(pool.map(evaluate_scene, enumerate(scenarios)))
    else:
        reports = [evaluate_scene(x) for x in enumerate(scenarios)]
    agg = _aggregate_reports(reports)
    json_path = os.path.join(args.out, "metrics.json")
    with open(json_path, "w") as f:
        json.dump(agg, f, indent=2, sort_keys=True)
        f.write("\n")
    csv_path = os.path.join(args.out, "metrics.csv")
    with open(csv_path, "w") as f:
        keys = list(agg["mean"].keys())
        f.write(",".join(keys) + "\n")
        f.write(",".join(repr(agg["mean"][k]) for k in keys) + "\n")
    write_manifest(args.out, "evaluate", vars(args), [args.data], [json_path, csv_path], started, args.seed)
    print(json.dumps(agg["mean"], sort_keys=True))
    return EXIT_OK


def _aggregate_reports(reports) -> dict:
    keys = [
        "collision_rate", "collision_with_ego_rate", "offroad_rate", "wrong_way_rate",
        "kinematic_infeasibility_rate", "ade", "fde", "min_ade", "min_fde",
    ]
    mean = {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
    return {"mean": mean, "per_scene": [r.to_json() for r in reports]}


def _dummy_bundle():
    """Minimal bundle for playback / constant-velocity evaluation runs."""
    from .diffusion import DiffusionConfig
    from .dynamics import ActionNormalization
    from .model import ModelBundle, ModelConfig, init_params

    cfg = ModelConfig(embed_dim=16, heads=2, encoder_layers=1, predictor_layers=1,
                      denoiser_blocks=1, modes=2, t_f=40, k_steps=5)
    return ModelBundle(init_params(cfg, np.random.default_rng(0)), {"vehicle": np.zeros((2, 2))},
                       cfg, DiffusionConfig(k_steps=5), "log", ActionNormalization())


def cmd_generate(args) -> int:
    from .model import ModelBundle
    from .simulator import compute_metrics, frame_dict, generate_open_loop, write_frame_log

    started = time.monotonic()
    scenario = _load_scenarios(args.scenario)[0]
    bundle = ModelBundle.load(_require(args.model))
    guidance = _load_guidance(args.guidance)
    os.makedirs(args.out, exist_ok=True)
    states = generate_open_loop(
        scenario, bundle, sampler=args.sampler, n_samples=args.samples,
        seed=args.seed, guidance=guidance,
    )
    outputs = []
    ids = [ag.id for ag in scenario.scene.agents]
    for s in range(args.samples):
        frames = [frame_dict(t, states[s, :, t], ids) for t in range(states.shape[2])]
        path = os.path.join(args.out, f"rollout{s:02d}.jsonl")
        write_frame_log(path, frames)
        outputs.append(path)
    if states.shape[2] == scenario.ground_truth.shape[1]:
        report = compute_metrics([states[s] for s in range(args.samples)], scenario)
        metrics_path = os.path.join(args.out, "metrics.json")
        with open(metrics_path, "w") as f:
            json.dump(report.to_json(), f, indent=2, sort_keys=True)
            f.write("\n")
        outputs.append(metrics_path)
    write_manifest(args.out, "generate", vars(args), [args.scenario, args.model], outputs, started, args.seed)
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(model_path=_require(args.model), data_path=args.data)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


def _require(path):
    if path is None or not os.path.exists(path):
        raise FileNotFoundError(str(path))
    return path


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trafficdiff", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    w = sub.add_parser("worldgen", help="generate a scenario dataset")
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--count", type=int, default=10)
    w.add_argument("--map-kind", default="mixed",
                   choices=["mixed", "straight", "curve", "four_way_intersection", "merge", "narrow_passage"])
    w.add_argument("--agents", type=int, default=4)
    w.add_argument("--horizon", type=int, default=80)
    w.add_argument("--dt", type=float, default=0.1)
    w.add_argument("--tight", action="store_true", help="congested placement")
    w.add_argument("--jobs", type=int, default=1, help="parallel scenario generation")
    w.add_argument("--out", default=os.path.join(_data_root(), "dataset.jsonl"))
    w.set_defaults(func=cmd_worldgen)

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="JSON file with model/diffusion/train sections")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int)
    t.add_argument("--loss-target", choices=["rollout_states", "raw_actions", "noise_eps"])
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("anchors", help="extract endpoint anchors from a dataset")
    a.add_argument("--data", required=True)
    a.add_argument("--modes", type=int, default=8)
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_anchors)

    d = sub.add_parser("schedule-dump", help="dump a noise schedule as CSV")
    d.add_argument("--kind", choices=["log", "cosine"], default="log")
    d.add_argument("--K", type=int, default=50)
    d.add_argument("--out")
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_schedule_dump)

    s = sub.add_parser("simulate", help="closed-loop simulation with frame logs")
    s.add_argument("--scenario", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--replan", type=int, default=10)
    s.add_argument("--sampler", default="ddim:5")
    s.add_argument("--ego-planner", default="model", choices=["model", "log_playback", "idm_route"])
    s.add_argument("--guidance")
    s.add_argument("--rollouts", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("evaluate", help="closed-loop metrics over a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--model")
    e.add_argument("--out", required=True)
    e.add_argument("--sampler", default="ddim:5")
    e.add_argument("--replan", type=int, default=10)
    e.add_argument("--rollouts", type=int, default=1)
    e.add_argument("--ego-planner", default="model", choices=["model", "log_playback", "idm_route"])
    e.add_argument("--agent-policy", default="model", choices=["model", "playback", "constant_velocity"])
    e.add_argument("--jobs", type=int, default=1, help="parallel scenario evaluation")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("generate", help="open-loop guided generation")
    g.add_argument("--scenario", required=True)
    g.add_argument("--model", required=True)
    g.add_argument("--guidance")
    g.add_argument("--samples", type=int, default=8)
    g.add_argument("--sampler", default="ddim:5")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    v = sub.add_parser("serve", help="HTTP/WS service for the scenario editor")
    v.add_argument("--port", type=int, default=8701)
    v.add_argument("--host", default="127.0.0.1")
    v.add_argument("--model", required=True)
    v.add_argument("--data", default=_data_root())
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        _err(EXIT_MISSING, f"missing file: {e}")
        return EXIT_MISSING
    except ConfigError as e:
        _err(EXIT_CONFIG, f"bad config: {e}")
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - boundary
        _err(EXIT_RUNTIME, f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME


def _err(code: int, message: str):
    sys.stderr.write(json.dumps({"code": code, "message": message}) + "\n")


if __name__ == "__main__":
    sys.exit(main())
