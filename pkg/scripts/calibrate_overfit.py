#!/usr/bin/env python3
"""Calibrate the 10-utterance overfit oracle and record its manifest.

Runs the committed overfit recipe (desk model on the deterministic paired
toy corpus) with early stopping at the acceptance thresholds, then writes
calibration/overfit_manifest.json: stop step, wall time, machine info,
and the eval history. The acceptance suite reproduces this run and holds
it to the recorded thresholds.

Usage: python scripts/calibrate_overfit.py [--workdir DIR] [--out FILE]
"""

import argparse
import json
import os
import sys
import time
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from sftts import corpus, training  # noqa: E402
from sftts.config import config_hash, overfit_run_config  # noqa: E402

THRESHOLDS = {"masked_l1": 0.1, "unit_accuracy": 0.9, "max_steps": 5000}


def reached(ev) -> bool:
    return (ev["l1"] < THRESHOLDS["masked_l1"]
            and min(ev["acc_d"], ev["acc_p"], ev["acc_e"]) > THRESHOLDS["unit_accuracy"])


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--workdir", default="/tmp/sftts_overfit_calibration")
    parser.add_argument("--out", default=str(REPO / "calibration" / "overfit_manifest.json"))
    args = parser.parse_args()

    workdir = Path(args.workdir)
    corpus_dir = workdir / "corpus"
    if not (corpus_dir / "manifest.tsv").exists():
        corpus.generate_corpus(corpus.overfit_spec(), corpus_dir, force=True)
        corpus.prepare_corpus(corpus_dir)
    loaded = corpus.Corpus(corpus_dir)
    cfg = overfit_run_config(corpus_dir)
    trainer = training.Trainer(cfg, loaded, out_dir=workdir)

    t0 = time.time()
    history = []

    def stop_check(tr, rec):
        if tr.step % cfg.train.eval_every:
            return False
        ev = {k: round(float(v), 5) for k, v in tr.evaluate().items()}
        ev["step"] = tr.step
        ev["elapsed"] = round(time.time() - t0, 1)
        history.append(ev)
        print(f"step {tr.step} ({ev['elapsed']}s): l1={ev['l1']:.4f} "
              f"acc={ev['acc_d']:.3f}/{ev['acc_p']:.3f}/{ev['acc_e']:.3f}", flush=True)
        return reached(ev)

    trainer.run(log_path=workdir / "loss_log.csv", stop_check=stop_check)
    final = {k: round(float(v), 5) for k, v in trainer.evaluate().items()}
    manifest = {
        "purpose": "overfit oracle calibration",
        "recipe": "config.overfit_run_config on the corpus.overfit_spec toy corpus",
        "config_hash": config_hash(cfg),
        "corpus_seed": corpus.overfit_spec().seed,
        "stop_step": trainer.step,
        "elapsed_seconds": round(time.time() - t0, 1),
        "cpu_count": os.cpu_count(),
        "final": final,
        "thresholds": THRESHOLDS,
        "history": history,
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"calibration manifest written to {out}")
    ok = reached(final)
    print("thresholds reached" if ok else "thresholds NOT reached")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
