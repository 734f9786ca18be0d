#!/usr/bin/env python3
"""End-to-end walkthrough against the bundled mock endpoint.

Builds a tiny QA corpus, scripts a mock generation service whose answers are
right about a quarter of the time (confident when right, unsure when wrong),
then runs the whole pipeline: ingest -> infer -> label -> calibrate ->
evaluate -> tradeoff -> histogram. Everything lands in ./demo_run/.
"""

from __future__ import annotations

import json
import random
import sys
from pathlib import Path

import yaml

from answer_or_search.cli import main
from answer_or_search.mock_service import Script, serve

FACTS = [
    ("what is the capital of france?", "Paris"),
    ("who wrote hamlet?", "William Shakespeare"),
    ("what is the largest planet?", "Jupiter"),
    ("what is the boiling point of water in celsius?", "100"),
    ("who painted the mona lisa?", "Leonardo da Vinci"),
    ("what is the chemical symbol for gold?", "Au"),
    ("what is the longest river in the world?", "Nile"),
    ("in which year did world war ii end?", "1945"),
    ("what is the smallest prime number?", "2"),
    ("what is the capital of japan?", "Tokyo"),
    ("who discovered penicillin?", "Alexander Fleming"),
    ("what is the fastest land animal?", "Cheetah"),
    ("how many continents are there?", "7"),
    ("what is the currency of japan?", "Yen"),
    ("who developed the theory of relativity?", "Albert Einstein"),
    ("what is the hardest natural substance?", "Diamond"),
    ("what gas do plants absorb?", "Carbon dioxide"),
    ("what is the largest ocean?", "Pacific Ocean"),
    ("who was the first person on the moon?", "Neil Armstrong"),
    ("what is the capital of italy?", "Rome"),
]


def build_workspace(root: Path) -> tuple[Path, Script]:
    data_dir = root / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    rng = random.Random(11)

    script = Script()
    with (data_dir / "dev.jsonl").open("w", encoding="utf-8") as fh:
        for i, (question, answer) in enumerate(FACTS, start=1):
            fh.write(
                json.dumps({"id": f"q{i:02d}", "question": question, "answers": [answer]})
                + "\n"
            )
            knows_it = i % 4 == 1
            if knows_it:
                script.add_question(question, answer, (round(-rng.uniform(0.02, 0.3), 4),))
            else:
                script.add_question(
                    question, f"hazy recollection {i}", (round(-rng.uniform(1.2, 3.0), 4),)
                )
    return data_dir / "dev.jsonl", script


def write_config(root: Path, dev_file: Path, endpoint_url: str) -> Path:
    config = {
        "corpus": {"dev": {"path": str(dev_file), "format": "canonical-jsonl"}},
        "endpoint": {"url": endpoint_url, "model_tag": "demo-mock", "max_retries": 2},
        "prompt": {"style": "zeroshot-qa", "template": "{q}", "seed": 13},
        "ppl": {"strategy": "max-f1"},
        "lambda": 1.0,
        "search_token": "<search>",
        "cache_dir": str(root / "cache"),
        "output_dir": str(root / "out"),
    }
    path = root / "config.yaml"
    path.write_text(yaml.safe_dump(config))
    return path


def run() -> int:
    root = Path("demo_run")
    dev_file, script = build_workspace(root)

    with serve(script) as service:
        config = write_config(root, dev_file, service.url)
        base = ["-c", str(config)]
        out = root / "out"

        steps = [
            ["ingest", *base],
            ["infer", *base, "--split", "dev"],
            ["label", *base, "--split", "dev"],
            ["calibrate", *base, "--split", "dev"],
            ["evaluate", *base, "--split", "dev", "--threshold", str(out / "threshold.json")],
            ["tradeoff", *base, "--report", str(out / "eval_report.json")],
            ["histogram", *base, "--split", "dev", "--edges", "0", "0.5", "1", "2", "4"],
        ]
        for argv in steps:
            print(f"\n$ answer-or-search {' '.join(argv)}")
            code = main(argv)
            if code != 0:
                print(f"step failed with exit code {code}", file=sys.stderr)
                return code

        print(f"\nmock endpoint served {len(service.request_log)} generation requests")
        print(f"outputs in {out}/ — rerunning this script reuses the cache.")
    return 0


if __name__ == "__main__":
    raise SystemExit(run())
