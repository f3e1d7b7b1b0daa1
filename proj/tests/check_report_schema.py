"""Generates a small dataset and model with the wamd binary and validates
the eval and sweep reports against docs/eval_report.schema.json."""

import json
import subprocess
import sys
import tempfile
from pathlib import Path

import jsonschema


def run(*args):
    subprocess.run([str(a) for a in args], check=True, stdout=subprocess.DEVNULL)


def main():
    wamd, schema_path = sys.argv[1], sys.argv[2]
    schema = json.loads(Path(schema_path).read_text())
    jsonschema.Draft202012Validator.check_schema(schema)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        run(wamd, "gen-data", "--out", tmp / "ds", "--scenes", 8, "--test-scenes", 2, "--seed", 4)
        train_cfg = tmp / "train.json"
        train_cfg.write_text(json.dumps({"train": {"epochs": 1, "warmup_iters": 2}}))
        run(wamd, "train", "--config", train_cfg, "--data", tmp / "ds", "--out", tmp / "model")
        ckpt = tmp / "model" / "model.ckpt"
        run(wamd, "eval", "--checkpoint", ckpt, "--data", tmp / "ds", "--out", tmp / "eval")
        run(wamd, "eval", "--checkpoint", ckpt, "--data", tmp / "ds", "--out", tmp / "eval_map",
            "--metric", "map2d")
        run(wamd, "sweep", "--checkpoint", ckpt, "--data", tmp / "ds", "--out", tmp / "sweep",
            "--grid", 1, "--directional", "--max-px", 2)
        for name in ("eval", "eval_map", "sweep"):
            report = json.loads((tmp / name / "eval_report.json").read_text())
            jsonschema.validate(report, schema)
            print(f"{name}: valid")


if __name__ == "__main__":
    main()
