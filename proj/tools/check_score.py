#!/usr/bin/env python3
"""Recompute bench scores from raw result rows and compare with `xecg score`.

usage: check_score.py <xecg binary> <scratch dir>
"""
import csv
import json
import random
import shutil
import subprocess
import sys
from collections import defaultdict
from pathlib import Path


def write_rows(d: Path, rng: random.Random):
    rows = []
    for model in ("alpha", "beta", "gamma"):
        for task in ("rhythm", "rpeak", "apnea", "age"):
            for seed in range(5):
                rows.append({"model": model, "task": task, "seed": seed, "mode": "linear_probe",
                             "metric_name": "auroc", "value": rng.uniform(0.4, 1.0)})
    rows.append({"model": "alpha", "task": "age", "seed": 7, "mode": "linear_probe", "metric_name": "auroc",
                 "value": 0.0, "status": "failed", "reason": "synthetic failure"})
    rng.shuffle(rows)
    half = len(rows) // 2
    for name, chunk in (("a.jsonl", rows[:half]), ("b.jsonl", rows[half:])):
        with open(d / name, "w") as f:
            for r in chunk:
                f.write(json.dumps(r, separators=(",", ":")) + "\n")
    return rows


def recompute(rows):
    per = defaultdict(lambda: defaultdict(list))
    for r in rows:
        if r.get("status", "ok") == "ok":
            per[r["model"] + "/" + r["mode"]][r["task"]].append(r["value"])
    scores = {}
    means = {}
    for m, tasks in per.items():
        means[m] = {t: sum(v) / len(v) for t, v in tasks.items()}
        scores[m] = sum(means[m].values()) / len(means[m])
    # mean rank over tasks, 1 = best, ties share the average rank
    models = sorted(means)
    tasks = sorted(next(iter(means.values())))
    rank = {m: 0.0 for m in models}
    for t in tasks:
        for m in models:
            better = sum(means[o][t] > means[m][t] for o in models)
            equal = sum(means[o][t] == means[m][t] for o in models)
            rank[m] += better + (equal + 1) / 2.0
    return scores, {m: rank[m] / len(tasks) for m in models}


def main():
    exe, scratch = sys.argv[1], Path(sys.argv[2])
    shutil.rmtree(scratch, ignore_errors=True)
    scratch.mkdir(parents=True)
    rows = write_rows(scratch, random.Random(2024))
    proc = subprocess.run([exe, "score", str(scratch)], capture_output=True, text=True)
    if proc.returncode != 1:  # one failed row must surface in the exit code
        print(f"unexpected exit code {proc.returncode}\n{proc.stdout}{proc.stderr}")
        return 1
    want_score, want_rank = recompute(rows)
    got = {}
    with open(scratch / "score.csv") as f:
        for r in csv.DictReader(f):
            got[r["model"]] = (float(r["bench_score"]), float(r["mean_rank"]))
    if set(got) != set(want_score):
        print(f"model sets differ: {sorted(got)} vs {sorted(want_score)}")
        return 1
    worst = 0.0
    for m, (s, rk) in got.items():
        worst = max(worst, abs(s - want_score[m]), abs(rk - want_rank[m]))
    print(f"models {len(got)}, max abs difference {worst:.3g}")
    return 0 if worst <= 1e-12 else 1


if __name__ == "__main__":
    sys.exit(main())
