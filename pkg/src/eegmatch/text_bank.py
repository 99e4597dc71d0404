"""Frozen per-class text embeddings from 16 prompt templates.

The bank is the stable intermediate modality of the matching system: one
unit-norm vector per class, built by rendering each label through 16 prompt
templates, embedding every rendered prompt, then averaging and re-normalizing.
Embeddings come either from a deterministic stub encoder (a seeded hash of
the text driving a pseudo-random unit vector) or from a file of externally
precomputed embeddings, so real pretrained text encoders stay out of this
repository.  Banks are immutable; training must never change their content
hash.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from eegmatch.errors import FormatError, ValidationError

__all__ = [
    "TEMPLATE_COUNT", "SLOT", "PromptTemplateSet", "TextBank",
    "default_templates", "load_templates", "render_prompts", "stub_embed",
    "build_stub_bank", "build_bank_from_file", "resolve_bank",
    "save_bank_file", "content_hash",
]

TEMPLATE_COUNT = 16
SLOT = "{label}"

BANK_MAGIC = b"EEGB"
BANK_VERSION = 1


@dataclass(frozen=True)
class PromptTemplateSet:
    """Exactly 16 templates, each containing the ``{label}`` slot once."""

    templates: Tuple[str, ...]

    def validate(self) -> "PromptTemplateSet":
        if len(self.templates) != TEMPLATE_COUNT:
            raise ValidationError(
                f"expected {TEMPLATE_COUNT} templates, got {len(self.templates)}")
        for i, template in enumerate(self.templates):
            if template.count(SLOT) != 1:
                raise ValidationError(
                    f"template {i} must contain the slot {SLOT!r} exactly once: "
                    f"{template!r}")
        return self


def load_templates(text: str) -> PromptTemplateSet:
    """Parse a template file body: one template per line, '#' comments."""
    templates = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        templates.append(line)
    return PromptTemplateSet(tuple(templates)).validate()


def default_templates() -> PromptTemplateSet:
    text = resources.files("eegmatch.data").joinpath("templates.txt").read_text("utf-8")
    return load_templates(text)


def render_prompts(label: str, templates: PromptTemplateSet) -> Tuple[str, ...]:
    """Substitute the label into every template, preserving order."""
    if not label:
        raise ValidationError("cannot render prompts for an empty label")
    templates.validate()
    return tuple(t.replace(SLOT, label) for t in templates.templates)


def stub_embed(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic pseudo-random unit vector derived from the text.

    Stands in for a pretrained text encoder: identical text gives identical
    vectors; distinct texts give near-orthogonal vectors at large dim.
    """
    if dim < 8:
        raise ValidationError(f"stub embedding dim must be >= 8, got {dim}")
    digest = hashlib.sha256(f"{seed}:{text}".encode("utf-8")).digest()
    words = struct.unpack("<8I", digest[:32])
    rng = np.random.Generator(np.random.PCG64(list(words)))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class TextBank:
    """Immutable per-class unit embeddings plus provenance."""

    dim: int
    labels: Tuple[str, ...]
    embeddings: np.ndarray  # (K, dim), rows unit norm, read-only
    provenance: str         # "stub" | "file"
    source: str             # seed descriptor or file path
    frozen: bool = True

    def __post_init__(self):
        arr = np.ascontiguousarray(self.embeddings, dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(self, "embeddings", arr)
        if arr.shape != (len(self.labels), self.dim):
            raise ValidationError(
                f"bank matrix shape {arr.shape} != ({len(self.labels)}, {self.dim})")
        norms = np.linalg.norm(arr, axis=1)
        if not np.all(np.abs(norms - 1.0) <= 1e-9):
            raise ValidationError("bank embeddings must be unit norm")
        if self.provenance not in ("stub", "file"):
            raise ValidationError(f"unknown bank provenance {self.provenance!r}")

    def embedding_for(self, label: str) -> np.ndarray:
        try:
            return self.embeddings[self.labels.index(label)]
        except ValueError:
            raise ValidationError(f"label {label!r} not in bank") from None

    def matrix(self) -> np.ndarray:
        return self.embeddings


def content_hash(bank: TextBank) -> str:
    """SHA-256 over labels, dim, and the exact embedding bytes."""
    h = hashlib.sha256()
    h.update(json.dumps({"labels": list(bank.labels), "dim": bank.dim},
                        sort_keys=True, separators=(",", ":")).encode("utf-8"))
    h.update(np.ascontiguousarray(bank.embeddings, dtype="<f8").tobytes())
    return h.hexdigest()


def _aggregate(per_template: np.ndarray) -> np.ndarray:
    """Mean over the 16 template embeddings, then L2-normalize."""
    mean = per_template.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm <= 1e-12:
        raise ValidationError("degenerate class embedding: template mean is ~zero")
    return mean / norm


def build_stub_bank(labels: Sequence[str], templates: PromptTemplateSet,
                    dim: int, seed: int = 0) -> TextBank:
    templates.validate()
    labels = tuple(labels)
    if not labels:
        raise ValidationError("bank needs at least one label")
    rows = []
    for label in labels:
        prompts = render_prompts(label, templates)
        per_template = np.stack([stub_embed(p, dim, seed) for p in prompts])
        rows.append(_aggregate(per_template))
    return TextBank(dim=dim, labels=labels, embeddings=np.stack(rows),
                    provenance="stub", source=f"stub(dim={dim},seed={seed})")


def save_bank_file(path, labels: Sequence[str], templates: PromptTemplateSet,
                   matrix: np.ndarray) -> None:
    """Write per-(label, template) embeddings: (K*16, dim) in manifest order."""
    templates.validate()
    labels = tuple(labels)
    matrix = np.asarray(matrix, dtype=np.float64)
    expected = len(labels) * TEMPLATE_COUNT
    if matrix.ndim != 2 or matrix.shape[0] != expected:
        raise ValidationError(
            f"bank file matrix must have {expected} rows (labels x templates), "
            f"got shape {matrix.shape}")
    header = json.dumps({
        "schema": BANK_VERSION,
        "labels": list(labels),
        "templates": list(templates.templates),
        "dim": int(matrix.shape[1]),
    }, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(BANK_MAGIC)
        fh.write(struct.pack("<I", BANK_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def build_bank_from_file(path, labels: Optional[Sequence[str]] = None) -> TextBank:
    """Load per-pair embeddings and aggregate one unit vector per class."""
    if not Path(path).is_file():
        raise FormatError(f"bank file not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != BANK_MAGIC:
            raise FormatError(f"bad bank magic {magic!r} in {path}")
        version = struct.unpack("<I", fh.read(4))[0]
        if version != BANK_VERSION:
            raise FormatError(f"unsupported bank version {version}")
        header_len = struct.unpack("<Q", fh.read(8))[0]
        try:
            manifest = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"corrupt bank manifest: {e}") from e
        payload = fh.read()
    file_labels = tuple(manifest.get("labels", ()))
    file_templates = tuple(manifest.get("templates", ()))
    dim = int(manifest.get("dim", 0))
    if len(file_templates) != TEMPLATE_COUNT:
        raise FormatError(
            f"bank file lists {len(file_templates)} templates; need {TEMPLATE_COUNT} "
            "(one embedding per (label, template) pair)")
    if dim < 1:
        raise FormatError("bank file declares a non-positive dim")
    expected = len(file_labels) * TEMPLATE_COUNT * dim * 4
    if len(payload) != expected:
        raise FormatError(
            f"bank payload is {len(payload)} bytes; manifest implies {expected} "
            "(missing (label, template) pairs or dimension inconsistency)")
    matrix = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    matrix = matrix.reshape(len(file_labels) * TEMPLATE_COUNT, dim)
    if labels is not None and tuple(labels) != file_labels:
        raise ValidationError(
            f"bank file labels {file_labels} do not match requested {tuple(labels)}")
    rows = []
    for i, _ in enumerate(file_labels):
        block = matrix[i * TEMPLATE_COUNT:(i + 1) * TEMPLATE_COUNT]
        rows.append(_aggregate(block))
    return TextBank(dim=dim, labels=file_labels, embeddings=np.stack(rows),
                    provenance="file", source=str(path))


def resolve_bank(spec: str, labels: Sequence[str], templates: PromptTemplateSet,
                 dim: int, seed: int) -> TextBank:
    """'stub' -> deterministic stub bank; anything else -> embedding file path."""
    if spec == "stub":
        return build_stub_bank(labels, templates, dim, seed)
    return build_bank_from_file(spec, labels=labels)
