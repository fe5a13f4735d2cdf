"""Deterministic synthetic corpora for tests, demos, and the CLI.

The clean fixture is a 16-question training set (8 closed, 8 open) over
8x8 grayscale images, small enough to overfit in seconds but shaped exactly
like a real corpus.  The anomalies variant plants a known set of quality
faults -- three undefined test answers, two implausible closed answers, one
conflicting duplicate, one dangling image reference -- together with a
corrections file that repairs every one of them.
"""

import json
import os

import numpy as np

from .data import VqaSample, save_dataset
from .rng import Rng

_ORGANS = ["lung", "heart", "liver", "spleen", "kidney", "brain", "femur", "aorta"]
_CONDITIONS = ["normal", "enlarged", "fractured", "inflamed"]
_FINDINGS = ["edema", "lesion", "fracture", "atrophy",
             "effusion", "cardiomegaly", "nodule", "cyst"]
_REGIONS = ["chest", "skull", "abdomen", "pelvis",
            "spine", "shoulder", "wrist", "ankle"]

# test-split answers that no training sample uses
_UNDEFINED_ANSWERS = ["phlebolith", "osteophyte", "granuloma"]
_IMPLAUSIBLE_ANSWERS = ["necrotic tissue", "soft tissue density"]

IMAGE_SIZE = 8


def _write_image(rng, path):
    np.save(path, rng.uniform(0.0, 1.0, (IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32))


def make_fixture(out_dir, seed=0, anomalies=False):
    """Write dataset.json, an images/ directory, and (optionally) a
    corrections.json; returns the paths plus the planted-fault counts."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    rng = Rng(seed)
    samples = []
    image_paths = {}

    def add(sample_id, question, answer, answer_type, split, image_name=None):
        name = image_name or f"img_{len(image_paths):03d}"
        ref = os.path.join("images", f"{name}.npy")
        if name not in image_paths:
            full = os.path.join(out_dir, ref)
            _write_image(rng.derive(f"image.{name}"), full)
            image_paths[name] = ref
        samples.append(VqaSample(sample_id, image_paths[name], question, answer,
                                 answer_type, split))
        return samples[-1]

    for i in range(8):
        condition = _CONDITIONS[i % len(_CONDITIONS)]
        add(f"train-closed-{i}", f"is the {_ORGANS[i]} {condition}",
            "yes" if i % 2 == 0 else "no", "closed", "train")
    for i in range(8):
        add(f"train-open-{i}", f"what abnormality is seen in the {_REGIONS[i]} image",
            _FINDINGS[i], "open", "train")

    add("test-closed-0", f"is the {_ORGANS[3]} {_CONDITIONS[1]}", "no", "closed", "test")
    for i in range(3):
        add(f"test-open-{i}", f"what abnormality affects the {_REGIONS[7 - i]} region",
            _FINDINGS[i], "open", "test")

    corrections = []
    planted = {"undefined_answer": 0, "type_mismatch": 0, "duplicate": 0, "dangling_image": 0}
    if anomalies:
        for i in range(3):
            victim = next(s for s in samples if s.sample_id == f"test-open-{i}")
            good = victim.answer
            victim.answer = _UNDEFINED_ANSWERS[i]
            planted["undefined_answer"] += 1
            corrections.append({
                "sample_id": victim.sample_id, "field": "answer",
                "old": victim.answer, "new": good,
                "rationale": "answer absent from the training vocabulary; "
                             "reviewed against the image",
            })
        for i in range(2):
            victim = next(s for s in samples if s.sample_id == f"train-closed-{i}")
            good = victim.answer
            victim.answer = _IMPLAUSIBLE_ANSWERS[i]
            planted["type_mismatch"] += 1
            corrections.append({
                "sample_id": victim.sample_id, "field": "answer",
                "old": victim.answer, "new": good,
                "rationale": "closed-ended question answered with free text",
            })
        # keep the duplicate off the type-mismatch victims above
        original = next(s for s in samples if s.sample_id == "train-closed-2")
        dup = add("train-closed-dup", original.question,
                  "no" if original.answer == "yes" else "yes",
                  "closed", "train", image_name="img_002")
        planted["duplicate"] += 1
        corrections.append({
            "sample_id": dup.sample_id, "field": "answer",
            "old": dup.answer, "new": original.answer,
            "rationale": "duplicate of an existing question; answers must agree",
        })
        victim = next(s for s in samples if s.sample_id == "train-open-5")
        good_ref = victim.image_ref
        victim.image_ref = os.path.join("images", "missing.npy")
        planted["dangling_image"] += 1
        corrections.append({
            "sample_id": victim.sample_id, "field": "image_ref",
            "old": victim.image_ref, "new": good_ref,
            "rationale": "file reference typo; the scan exists under its own id",
        })

    dataset_path = os.path.join(out_dir, "dataset.json")
    save_dataset(samples, dataset_path)
    result = {
        "dataset": dataset_path,
        "images_dir": os.path.join(out_dir, "images"),
        "n_train": sum(1 for s in samples if s.split == "train"),
        "n_test": sum(1 for s in samples if s.split == "test"),
        "planted": planted,
    }
    if anomalies:
        corrections_path = os.path.join(out_dir, "corrections.json")
        with open(corrections_path, "w", encoding="utf-8") as fh:
            json.dump(corrections, fh, indent=2)
            fh.write("\n")
        result["corrections"] = corrections_path
    return result
