"""End-to-end toy run: synthetic data, mining, encoder, flow, matching, PCK.

    python3 scripts/toy_pipeline.py --out runs/toy --pairs 12 --jobs 4

Mined correspondences replace the synthetic ground truth before training, so
the run exercises the weakly supervised path. Keypoint PCK is reported for
nearest-neighbour matching and for the flow model.
"""

import argparse
import json
import shutil
from pathlib import Path

from msflow import cli
from msflow.dataset import write_synthetic


def step(command: str, cfg: Path, out: Path, jobs: int):
    code = cli.main([command, "--config", str(cfg), "--out", str(out), "--jobs", str(jobs)])
    if code != 0:
        raise SystemExit(f"{command} failed with exit code {code}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/toy"))
    ap.add_argument("--pairs", type=int, default=12)
    ap.add_argument("--kind", default="translation", choices=["translation", "warp", "blob"])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--encoder-epochs", type=int, default=20)
    ap.add_argument("--flow-epochs", type=int, default=10)
    args = ap.parse_args()

    out = args.out
    data = write_synthetic(out / "data", args.pairs, 64, seed=args.seed, kind=args.kind)
    base = f"profile: toy\nseed: {args.seed}\n"

    def config(name: str, text: str) -> Path:
        p = out / f"{name}.yaml"
        p.write_text(base + text)
        return p

    step("mine", config("mine", f"data: {{path: {data}}}\n"), out / "mine", args.jobs)
    mined = out / "mined"
    shutil.copytree(data / "images", mined / "images", dirs_exist_ok=True)
    shutil.copy(data / "classes.json", mined / "classes.json")
    shutil.copy(out / "mine" / "pairs.jsonl", mined / "pairs.jsonl")

    step("train-encoder", config("encoder", f"data: {{path: {mined}}}\nencoder: {{epochs: {args.encoder_epochs}}}\n"),
         out / "encoder", args.jobs)
    enc = out / "encoder" / "encoder"
    step("train-flow", config("flow", f"data: {{path: {mined}}}\nencoder: {{checkpoint: {enc}}}\n"
                                      f"flow: {{epochs: {args.flow_epochs}}}\n"), out / "flow", args.jobs)
    flow = out / "flow" / "flow"

    results = {}
    for mode in ("nn", "flow"):
        step("match", config(f"match_{mode}", f"data: {{path: {data}}}\nencoder: {{checkpoint: {enc}}}\n"
                                             f"flow: {{checkpoint: {flow}}}\nmatch: {{mode: {mode}}}\n"),
             out / f"match_{mode}", args.jobs)
        step("eval", config(f"eval_{mode}", f"data: {{path: {data}}}\n"
                                            f"eval: {{predictions: {out / f'match_{mode}' / 'predictions.jsonl'}}}\n"),
             out / f"eval_{mode}", args.jobs)
        results[mode] = [json.loads(line) for line in (out / f"eval_{mode}" / "metrics.jsonl").read_text().splitlines()]
    step("report-weights", config("weights", f"data: {{path: {data}}}\nencoder: {{checkpoint: {enc}}}\n"),
         out / "weights", args.jobs)
    (out / "summary.json").write_text(json.dumps(results, indent=2) + "\n")
    print(json.dumps(results, indent=2))


if __name__ == "__main__":
    main()
