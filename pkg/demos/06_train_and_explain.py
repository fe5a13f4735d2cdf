"""A full desk-scale training run, reproducibly, with receipts.

Desk scale means every dimension is shrunk until one training run takes
seconds on a laptop while exercising exactly the same code paths as a
full-size model: both image branches, both attention views, typed fusion,
the composite loss, and the optimizer.  The run directory it leaves
behind has a metrics stream (deliberately free of wall-clock times so
identical runs are byte-identical) and best/last checkpoints that reload
bit for bit.
"""

import json
import tempfile
import time
from pathlib import Path

from mvqa.config import TrainConfig
from mvqa.train import (
    evaluate_checkpoint,
    evaluate_model,
    explain_sample,
    load_corpus,
    train,
)
from mvqa.fixtures import make_fixture
from mvqa.weights import load_model


def section(title):
    print(f"\n=== {title} ===")


def main():
    workdir = Path(tempfile.mkdtemp(prefix="mvqa-train-"))
    info = make_fixture(str(workdir / "corpus"), seed=0)
    dataset = info["dataset"]
    print(f"synthetic corpus: {info['n_train']} train / {info['n_test']} test samples")

    section("desk-scale configuration")
    config = TrainConfig().desk_scale()
    config.seed = 0
    config.epochs = 500
    print(f"tokens {config.n_tokens}, state {config.state_dim}, "
          f"image vector {config.image_dim}, rank {config.fusion_rank}, "
          f"gamma {config.gamma}, lr {config.learning_rate}")

    section("training until the train split is memorized")
    run_dir = workdir / "run"
    started = time.monotonic()
    outcome = train(config, dataset, out_dir=str(run_dir),
                    stop_when_perfect=True)
    elapsed = time.monotonic() - started
    for record in outcome.metrics[::20] + outcome.metrics[-1:]:
        print(f"  epoch {record.epoch:3d}: loss {record.total:.4f}, "
              f"train accuracy {record.overall_accuracy:6.2f}%")
    print(f"reached 100% at epoch {outcome.metrics[-1].epoch} "
          f"in {elapsed:.1f}s; best epoch {outcome.best_epoch}")

    section("the run directory")
    for path in sorted(run_dir.iterdir()):
        print(f"  {path.name:<18} {path.stat().st_size:7d} bytes")
    first_line = (run_dir / "metrics.jsonl").read_text().splitlines()[0]
    print(f"first metrics line: {json.dumps(json.loads(first_line))[:76]}...")

    section("checkpoints reload and score identically")
    corpus = load_corpus(dataset)
    model = load_model(str(run_dir / "best.mvqw"))
    live = evaluate_model(outcome.model, corpus["samples"], corpus["root"], split="train")
    reloaded = evaluate_model(model, corpus["samples"], corpus["root"], split="train")
    print(f"in-memory model : {live.overall_accuracy:.2f}% on the train split")
    print(f"reloaded weights: {reloaded.overall_accuracy:.2f}% on the train split")
    held_out = evaluate_checkpoint(str(run_dir / "best.mvqw"), dataset)
    print(f"held-out test split: {held_out.overall_accuracy:.2f}% "
          f"(memorizing 16 samples is capacity, not generalization)")

    section("what the trained model looked at")
    sample = next(s for s in corpus["samples"] if s.split == "train")
    print(explain_sample(model, sample, corpus["root"]), end="")


if __name__ == "__main__":
    main()
