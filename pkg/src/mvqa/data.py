"""The on-disk corpus: loading, answer vocabularies, quality checks, repair,
and type-split batching.

A dataset is one JSON document holding a "samples" array.  Each record
carries a sample id, an image reference (path relative to the dataset file),
the question text, the answer, the answer type (closed or open), and the
split (train or test).  Unknown fields ride along untouched so a
load/save cycle is lossless.

Quality control mirrors a manual audit workflow: ``validate`` reports
findings without touching anything, a corrections file records reviewed
fixes, and ``repair`` applies exactly the corrections whose recorded old
values still match.
"""

import json
import os
from collections import Counter, OrderedDict

import numpy as np

from .encoders import tokenize_and_pad
from .rng import Rng

CLOSED = "closed"
OPEN = "open"
ANSWER_TYPES = (CLOSED, OPEN)
SPLITS = ("train", "test")

REQUIRED_FIELDS = ("sample_id", "image_ref", "question", "answer", "answer_type", "split")

UNDEFINED_ANSWER = "undefined_answer"
TYPE_MISMATCH = "type_mismatch"
MISSING_FIELD = "missing_field"
DUPLICATE = "duplicate"
DANGLING_IMAGE = "dangling_image"
FINDING_KINDS = (UNDEFINED_ANSWER, TYPE_MISMATCH, MISSING_FIELD, DUPLICATE, DANGLING_IMAGE)

# kinds that make a dataset unusable for training, as opposed to label noise
FATAL_KINDS = (MISSING_FIELD, DUPLICATE, DANGLING_IMAGE)


class DatasetError(Exception):
    pass


def normalize_answer(answer):
    return answer.strip().lower()


class VqaSample:
    """One question/answer record; unknown JSON fields are preserved."""

    __slots__ = ("sample_id", "image_ref", "question", "answer",
                 "answer_type", "split", "extras")

    def __init__(self, sample_id, image_ref, question, answer, answer_type,
                 split, extras=None):
        self.sample_id = sample_id
        self.image_ref = image_ref
        self.question = question
        self.answer = answer
        self.answer_type = answer_type
        self.split = split
        self.extras = dict(extras or {})

    @classmethod
    def from_record(cls, record, index):
        if not isinstance(record, dict):
            raise DatasetError(f"record {index}: expected an object, got {type(record).__name__}")
        fields = {}
        for name in REQUIRED_FIELDS:
            value = record.get(name, "")
            if value is None:
                value = ""
            if not isinstance(value, str):
                raise DatasetError(
                    f"record {index}: field {name} must be a string, got {type(value).__name__}")
            fields[name] = value
        if not fields["sample_id"]:
            fields["sample_id"] = f"#record{index}"
        extras = {k: v for k, v in record.items() if k not in REQUIRED_FIELDS}
        return cls(extras=extras, **fields)

    def to_record(self):
        record = OrderedDict((name, getattr(self, name)) for name in REQUIRED_FIELDS)
        record.update(self.extras)
        return record

    def missing_fields(self):
        """Names of required fields that are empty or carry a bad enum value."""
        problems = []
        for name in REQUIRED_FIELDS:
            if not getattr(self, name):
                problems.append(name)
        if self.answer_type and self.answer_type not in ANSWER_TYPES:
            problems.append("answer_type")
        if self.split and self.split not in SPLITS:
            problems.append("split")
        return problems

    def copy(self):
        return VqaSample(self.sample_id, self.image_ref, self.question, self.answer,
                         self.answer_type, self.split, dict(self.extras))

    def __repr__(self):
        return f"VqaSample({self.sample_id!r}, {self.answer_type}/{self.split})"


def load_dataset(path, strict=False):
    """Read a corpus file.  ``strict`` refuses structurally broken records."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            document = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: not valid JSON at line {exc.lineno}: {exc.msg}") from exc
    except OSError as exc:
        raise DatasetError(f"{path}: {exc}") from exc
    if not isinstance(document, dict) or "samples" not in document:
        raise DatasetError(f'{path}: expected an object with a "samples" array')
    records = document["samples"]
    if not isinstance(records, list):
        raise DatasetError(f'{path}: "samples" must be an array')
    samples = []
    for index, record in enumerate(records):
        sample = VqaSample.from_record(record, index)
        if strict:
            problems = sample.missing_fields()
            if problems:
                raise DatasetError(
                    f"{path}: record {index} ({sample.sample_id}): "
                    f"bad or missing fields: {', '.join(problems)}")
        samples.append(sample)
    return samples


def save_dataset(samples, path):
    document = {"samples": [s.to_record() for s in samples]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(document, fh, indent=2, ensure_ascii=False)
        fh.write("\n")


class AnswerVocabulary:
    """Per-type ordered answer lists with lexicographic, stable indices."""

    def __init__(self, closed, opened, excluded=()):
        self.closed = list(closed)
        self.open = list(opened)
        self.excluded = list(excluded)
        self._index = {
            CLOSED: {a: i for i, a in enumerate(self.closed)},
            OPEN: {a: i for i, a in enumerate(self.open)},
        }

    def answers(self, answer_type):
        if answer_type not in ANSWER_TYPES:
            raise DatasetError(f"unknown answer type {answer_type!r}")
        return self.closed if answer_type == CLOSED else self.open

    def size(self, answer_type):
        return len(self.answers(answer_type))

    def index_of(self, answer_type, answer):
        return self._index[answer_type].get(normalize_answer(answer))

    def answer_at(self, answer_type, index):
        return self.answers(answer_type)[index]

    def __contains__(self, pair):
        answer_type, answer = pair
        return self.index_of(answer_type, answer) is not None

    def to_dict(self):
        return {"closed": self.closed, "open": self.open}

    @classmethod
    def from_dict(cls, raw):
        return cls(raw["closed"], raw["open"])


def build_answer_vocabulary(samples, splits=("train",)):
    """Unique normalized answers per type, sorted for stable indices.

    Empty answers are excluded and reported on the vocabulary's
    ``excluded`` list rather than silently dropped.
    """
    seen = {CLOSED: set(), OPEN: set()}
    excluded = []
    for sample in samples:
        if sample.split not in splits or sample.answer_type not in ANSWER_TYPES:
            continue
        normalized = normalize_answer(sample.answer)
        if not normalized:
            excluded.append((sample.sample_id, "empty answer"))
            continue
        seen[sample.answer_type].add(normalized)
    return AnswerVocabulary(sorted(seen[CLOSED]), sorted(seen[OPEN]), excluded)


class Finding:
    __slots__ = ("sample_id", "kind", "detail")

    def __init__(self, sample_id, kind, detail):
        if kind not in FINDING_KINDS:
            raise DatasetError(f"unknown finding kind {kind!r}")
        self.sample_id = sample_id
        self.kind = kind
        self.detail = detail

    def to_dict(self):
        return {"sample_id": self.sample_id, "kind": self.kind, "detail": self.detail}

    def __repr__(self):
        return f"Finding({self.sample_id!r}, {self.kind}, {self.detail!r})"


class ValidationReport:
    """All findings from one validation pass, with per-kind counts."""

    def __init__(self, findings, n_samples):
        self.findings = list(findings)
        self.n_samples = int(n_samples)
        self.counts = Counter(f.kind for f in self.findings)

    def count(self, kind):
        return self.counts.get(kind, 0)

    def by_kind(self, kind):
        return [f for f in self.findings if f.kind == kind]

    @property
    def clean(self):
        return not self.findings

    def fatal_findings(self):
        return [f for f in self.findings if f.kind in FATAL_KINDS]

    def to_dict(self):
        return {
            "n_samples": self.n_samples,
            "counts": {kind: self.count(kind) for kind in FINDING_KINDS},
            "findings": [f.to_dict() for f in self.findings],
        }

    def to_text(self):
        lines = [f"validated {self.n_samples} samples: "
                 + ("clean" if self.clean else f"{len(self.findings)} findings")]
        for kind in FINDING_KINDS:
            lines.append(f"  {kind}: {self.count(kind)}")
        for f in self.findings:
            lines.append(f"  [{f.kind}] {f.sample_id}: {f.detail}")
        return "\n".join(lines) + "\n"


def _closed_answer_plausible(sample):
    """Closed-ended answers must be yes/no or appear inside the question.

    The question-substring rule admits either-or questions ("... ct or mri?")
    whose answer names one of the spelled-out choices.
    """
    normalized = normalize_answer(sample.answer)
    if normalized in ("yes", "no"):
        return True
    return normalized in sample.question.lower()


def validate(samples, vocab, image_root=None):
    """Pure check pass; returns a report and never mutates the samples."""
    findings = []
    for sample in samples:
        missing = sample.missing_fields()
        for field in missing:
            findings.append(Finding(sample.sample_id, MISSING_FIELD,
                                    f"field {field} is missing, empty, or invalid"))
        if not sample.answer or sample.answer_type not in ANSWER_TYPES:
            continue
        if sample.split == "test" and (sample.answer_type, sample.answer) not in vocab:
            findings.append(Finding(
                sample.sample_id, UNDEFINED_ANSWER,
                f"test answer {sample.answer!r} is outside the training "
                f"{sample.answer_type} vocabulary"))
        if sample.answer_type == CLOSED and not _closed_answer_plausible(sample):
            findings.append(Finding(
                sample.sample_id, TYPE_MISMATCH,
                f"closed-ended answer {sample.answer!r} is neither yes/no nor a "
                f"choice named in the question"))
        if image_root is not None and sample.image_ref:
            target = os.path.join(image_root, sample.image_ref)
            if not os.path.exists(target):
                findings.append(Finding(sample.sample_id, DANGLING_IMAGE,
                                        f"image_ref {sample.image_ref!r} has no backing file"))

    groups = OrderedDict()
    for sample in samples:
        if not sample.image_ref or not sample.question:
            continue
        key = (sample.image_ref, " ".join(sample.question.lower().split()))
        groups.setdefault(key, []).append(sample)
    for (image_ref, _), members in groups.items():
        if len(members) < 2:
            continue
        answers = {normalize_answer(m.answer) for m in members}
        if len(answers) > 1:
            ids = ", ".join(m.sample_id for m in members)
            findings.append(Finding(
                members[1].sample_id, DUPLICATE,
                f"same image ({image_ref}) and question as {members[0].sample_id} "
                f"with conflicting answers (samples: {ids})"))
    return ValidationReport(findings, len(samples))


class Correction:
    """One reviewed fix: set ``field`` of ``sample_id`` from ``old`` to ``new``."""

    __slots__ = ("sample_id", "field", "old", "new", "rationale")

    def __init__(self, sample_id, field, old, new, rationale=""):
        self.sample_id = sample_id
        self.field = field
        self.old = old
        self.new = new
        self.rationale = rationale

    @classmethod
    def from_record(cls, record, index):
        if not isinstance(record, dict):
            raise DatasetError(f"correction {index}: expected an object")
        missing = [k for k in ("sample_id", "field", "old", "new") if k not in record]
        if missing:
            raise DatasetError(f"correction {index}: missing keys: {', '.join(missing)}")
        return cls(record["sample_id"], record["field"], record["old"], record["new"],
                   record.get("rationale", ""))

    def to_dict(self):
        return {"sample_id": self.sample_id, "field": self.field,
                "old": self.old, "new": self.new, "rationale": self.rationale}


def load_corrections(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            document = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: not valid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(document, list):
        raise DatasetError(f"{path}: corrections must be a JSON array")
    return [Correction.from_record(r, i) for i, r in enumerate(document)]


class AuditEntry:
    __slots__ = ("sample_id", "field", "old", "new", "applied", "reason")

    def __init__(self, sample_id, field, old, new, applied, reason):
        self.sample_id = sample_id
        self.field = field
        self.old = old
        self.new = new
        self.applied = applied
        self.reason = reason

    def to_dict(self):
        return {"sample_id": self.sample_id, "field": self.field, "old": self.old,
                "new": self.new, "applied": self.applied, "reason": self.reason}


def repair(samples, corrections):
    """Apply matching corrections to copies of the samples.

    A correction applies only when its recorded old value equals the current
    field content; anything else is rejected into the audit log so a stale
    corrections file cannot silently clobber data.
    """
    repaired = [s.copy() for s in samples]
    by_id = {}
    for sample in repaired:
        by_id.setdefault(sample.sample_id, sample)
    audit = []
    for c in corrections:
        sample = by_id.get(c.sample_id)
        if sample is None:
            audit.append(AuditEntry(c.sample_id, c.field, c.old, c.new, False,
                                    "no sample with this id"))
            continue
        if c.field not in REQUIRED_FIELDS:
            audit.append(AuditEntry(c.sample_id, c.field, c.old, c.new, False,
                                    f"unknown field {c.field!r}"))
            continue
        current = getattr(sample, c.field)
        if current != c.old:
            audit.append(AuditEntry(c.sample_id, c.field, c.old, c.new, False,
                                    f"stale old value: dataset holds {current!r}"))
            continue
        setattr(sample, c.field, c.new)
        audit.append(AuditEntry(c.sample_id, c.field, c.old, c.new, True, "applied"))
    return repaired, audit


def load_image(path):
    """Read an image file into a ``channels x h x w`` float array in [0, 1]."""
    if path.endswith(".npy"):
        arr = np.load(path)
        if arr.ndim == 2:
            arr = arr[None, :, :]
        if arr.ndim != 3:
            raise DatasetError(f"{path}: expected a 2-d or 3-d array, got {arr.ndim}-d")
        return np.asarray(arr, dtype=np.float32)
    from PIL import Image

    with Image.open(path) as img:
        gray = np.asarray(img.convert("L"), dtype=np.float32) / 255.0
    return gray[None, :, :]


class Batch:
    """A type-homogeneous slice of the corpus, ready for the model."""

    __slots__ = ("answer_type", "samples", "sequences", "targets")

    def __init__(self, answer_type, samples, sequences, targets):
        self.answer_type = answer_type
        self.samples = list(samples)
        self.sequences = list(sequences)
        self.targets = list(targets)

    def __len__(self):
        return len(self.samples)


def make_batches(samples, answer_vocab, question_vocab, n_tokens, batch_size, seed,
                 split="train"):
    """Shuffle within each answer type and chunk; closed batches come first.

    Returns ``(batches, excluded)`` where ``excluded`` lists (sample_id,
    reason) pairs for samples whose answer is outside the vocabulary.
    """
    if batch_size < 1:
        raise DatasetError(f"batch_size must be at least 1, got {batch_size}")
    excluded = []
    per_type = {CLOSED: [], OPEN: []}
    for sample in samples:
        if sample.split != split:
            continue
        if sample.answer_type not in ANSWER_TYPES:
            excluded.append((sample.sample_id, f"bad answer_type {sample.answer_type!r}"))
            continue
        if answer_vocab.index_of(sample.answer_type, sample.answer) is None:
            excluded.append((sample.sample_id,
                             f"answer {sample.answer!r} outside the {sample.answer_type} vocabulary"))
            continue
        per_type[sample.answer_type].append(sample)

    batches = []
    for answer_type in ANSWER_TYPES:
        bucket = per_type[answer_type]
        Rng(seed).derive(f"batch.{answer_type}").shuffle(bucket)
        for start in range(0, len(bucket), batch_size):
            chunk = bucket[start:start + batch_size]
            sequences = [tokenize_and_pad(s.question, question_vocab, n_tokens) for s in chunk]
            targets = []
            for s in chunk:
                one_hot = np.zeros(answer_vocab.size(answer_type), dtype=np.float32)
                one_hot[answer_vocab.index_of(answer_type, s.answer)] = 1.0
                targets.append(one_hot)
            batches.append(Batch(answer_type, chunk, sequences, targets))
    return batches, excluded
