#!/usr/bin/env python3
"""End-to-end desk pipeline: dataset -> training -> evaluation -> guided demo.

Defaults finish in a couple of minutes with a small model; pass --full for the
2000-scenario configuration used by the acceptance suite (~25 minutes).
"""

import argparse
import json
import os
import sys

from trafficdiff.cli import main as cli


def run(argv):
    print("+ trafficdiff " + " ".join(argv), flush=True)
    rc = cli(argv)
    if rc != 0:
        sys.exit(rc)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/pipeline")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--full", action="store_true", help="acceptance-scale settings")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    data = os.path.join(args.out, "dataset.jsonl")
    model_dir = os.path.join(args.out, "model")
    count = 2000 if args.full else 120
    config = {
        "train": {
            "epochs": 10 if args.full else 3,
            "batch_size": 8,
            "warmup_steps": 200 if args.full else 40,
        }
    }
    if not args.full:
        config["model"] = {
            "embed_dim": 32, "heads": 4, "encoder_layers": 1, "predictor_layers": 1,
            "denoiser_blocks": 1, "modes": 4,
        }
    cfg_path = os.path.join(args.out, "train_config.json")
    with open(cfg_path, "w") as f:
        json.dump(config, f, indent=2)

    run(["worldgen", "--seed", str(args.seed), "--count", str(count),
         "--map-kind", "mixed", "--agents", "4", "--out", data])
    run(["train", "--data", data, "--config", cfg_path, "--out", model_dir,
         "--seed", str(args.seed)])
    run(["evaluate", "--data", data, "--model", os.path.join(model_dir, "model.ckpt"),
         "--out", os.path.join(args.out, "eval"), "--sampler", "ddim:5",
         "--rollouts", "2", "--seed", str(args.seed)])

    # guided generation demo: steer agent 0 five meters left of its logged goal
    from trafficdiff.worldgen import load_dataset
    from trafficdiff.scene import save_scenario

    scenario = load_dataset(data)[0]
    scn_path = os.path.join(args.out, "demo_scenario.json")
    save_scenario(scn_path, scenario)
    goal = scenario.ground_truth[0, -1, :2] + [0.0, 5.0]
    spec = {
        "terms": [{"kind": "goal", "agents": [0], "goals": [[float(goal[0]), float(goal[1])]],
                   "weight": 3.0}],
        "placement": "on_mean",
    }
    spec_path = os.path.join(args.out, "goal_guidance.json")
    with open(spec_path, "w") as f:
        json.dump(spec, f, indent=2)
    run(["generate", "--scenario", scn_path, "--model", os.path.join(model_dir, "model.ckpt"),
         "--guidance", spec_path, "--samples", "4", "--sampler", "ddim:10",
         "--out", os.path.join(args.out, "guided"), "--seed", str(args.seed)])
    print(f"\npipeline artifacts in {args.out}/")
    print(f"next: trafficdiff serve --model {model_dir}/model.ckpt --data {data}")


if __name__ == "__main__":
    main()
