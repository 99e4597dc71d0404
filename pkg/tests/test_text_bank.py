"""Text bank: template validation, stub determinism, file format, freeze contract."""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np
import pytest

from eegmatch.errors import FormatError, ValidationError
from eegmatch.text_bank import (BANK_MAGIC, SLOT, TEMPLATE_COUNT,
                                PromptTemplateSet, build_bank_from_file,
                                build_stub_bank, content_hash,
                                default_templates, load_templates,
                                render_prompts, resolve_bank, save_bank_file,
                                stub_embed)

LABELS = ("negative", "neutral", "positive")


# -- templates ----------------------------------------------------------------------

def test_default_templates_are_sixteen_with_one_slot_each():
    templates = default_templates()
    assert len(templates.templates) == TEMPLATE_COUNT == 16
    for t in templates.templates:
        assert t.count(SLOT) == 1
    assert templates.templates[0] == "A video of {label} emotion"
    assert templates.templates[1] == "The video makes the human feel {label}"
    assert templates.templates[2] == "The human feels {label} now"


def test_template_count_enforced():
    lines = "\n".join(f"prompt {i} {{label}}" for i in range(15))
    with pytest.raises(ValidationError, match="16"):
        load_templates(lines)


def test_template_slot_enforced():
    good = [f"prompt {i} {{label}}" for i in range(16)]
    no_slot = good[:]
    no_slot[7] = "prompt seven without a slot"
    with pytest.raises(ValidationError, match="slot"):
        load_templates("\n".join(no_slot))
    double = good[:]
    double[3] = "{label} prompt three {label}"
    with pytest.raises(ValidationError, match="slot"):
        load_templates("\n".join(double))


def test_comments_and_blank_lines_skipped():
    lines = ["# header comment", ""]
    lines += [f"prompt {i} {{label}}" for i in range(16)]
    templates = load_templates("\n".join(lines))
    assert len(templates.templates) == 16


def test_render_prompts():
    templates = default_templates()
    prompts = render_prompts("positive", templates)
    assert len(prompts) == 16
    assert prompts[0] == "A video of positive emotion"
    assert all("positive" in p and SLOT not in p for p in prompts)
    with pytest.raises(ValidationError, match="label"):
        render_prompts("", templates)


# -- stub embeddings ----------------------------------------------------------------

def test_stub_embed_deterministic_unit_norm():
    a = stub_embed("The human feels positive now", 64)
    b = stub_embed("The human feels positive now", 64)
    np.testing.assert_array_equal(a, b)
    assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-12)
    c = stub_embed("The human feels negative now", 64)
    assert not np.allclose(a, c)
    d = stub_embed("The human feels positive now", 64, seed=1)
    assert not np.allclose(a, d)


def test_stub_embed_minimum_dim():
    with pytest.raises(ValidationError, match="dim"):
        stub_embed("text", 4)


def test_stub_bank_class_separation():
    """Frozen bound: stub class embeddings stay nearly orthogonal at dim 64."""
    bank = build_stub_bank(LABELS, default_templates(), 64)
    m = bank.matrix()
    gram = m @ m.T
    off_diag = np.abs(gram[~np.eye(len(LABELS), dtype=bool)])
    assert off_diag.max() <= 0.25
    np.testing.assert_allclose(np.diag(gram), 1.0, atol=1e-12)


def test_bank_is_frozen():
    bank = build_stub_bank(LABELS, default_templates(), 16)
    with pytest.raises(dataclasses.FrozenInstanceError):
        bank.dim = 32
    with pytest.raises(ValueError):
        bank.embeddings[0, 0] = 5.0  # read-only array
    assert bank.frozen and bank.provenance == "stub"


def test_bank_embedding_lookup():
    bank = build_stub_bank(LABELS, default_templates(), 16)
    np.testing.assert_array_equal(bank.embedding_for("neutral"),
                                  bank.embeddings[1])
    with pytest.raises(ValidationError, match="not in bank"):
        bank.embedding_for("bliss")


def test_content_hash_tracks_content():
    bank1 = build_stub_bank(LABELS, default_templates(), 16)
    bank2 = build_stub_bank(LABELS, default_templates(), 16)
    assert content_hash(bank1) == content_hash(bank2)
    bank3 = build_stub_bank(LABELS, default_templates(), 16, seed=5)
    assert content_hash(bank1) != content_hash(bank3)
    bank4 = build_stub_bank(("negative", "positive"), default_templates(), 16)
    assert content_hash(bank1) != content_hash(bank4)


# -- bank file format ---------------------------------------------------------------

def _write_bank(tmp_path, dim=16, seed=0):
    templates = default_templates()
    rows = np.stack([stub_embed(p, dim, seed)
                     for label in LABELS
                     for p in render_prompts(label, templates)])
    path = tmp_path / "bank.eegb"
    save_bank_file(path, LABELS, templates, rows)
    return path, rows


def test_bank_file_roundtrip_and_recompute_oracle(tmp_path):
    """Re-derive class vectors from the raw payload: mean over each label's
    16 template rows, then L2-normalize; must match the loaded bank."""
    path, rows = _write_bank(tmp_path)
    bank = build_bank_from_file(path)
    assert bank.provenance == "file" and bank.labels == LABELS
    for k in range(len(LABELS)):
        block = rows[k * 16:(k + 1) * 16].astype(np.float32).astype(np.float64)
        mean = block.mean(axis=0)
        expect = mean / np.linalg.norm(mean)
        np.testing.assert_allclose(bank.embeddings[k], expect, atol=1e-6)


def test_bank_file_header_byte_oracle(tmp_path):
    path, _ = _write_bank(tmp_path, dim=16)
    raw = path.read_bytes()
    assert raw[:4] == BANK_MAGIC == b"EEGB"
    (version,) = struct.unpack("<I", raw[4:8])
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    assert header["labels"] == list(LABELS)
    assert header["dim"] == 16
    assert len(header["templates"]) == 16
    payload = raw[16 + hlen:]
    assert len(payload) == len(LABELS) * 16 * 16 * 4  # K*16 rows of f32[dim]


def test_bank_file_corruption_rejected(tmp_path):
    path, _ = _write_bank(tmp_path)
    raw = path.read_bytes()
    bad = tmp_path / "bad.eegb"
    bad.write_bytes(b"YYYY" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        build_bank_from_file(bad)
    bad.write_bytes(raw[:-12])
    with pytest.raises(FormatError, match="payload|truncat"):
        build_bank_from_file(bad)


def test_bank_file_label_check(tmp_path):
    path, _ = _write_bank(tmp_path)
    with pytest.raises(ValidationError, match="label"):
        build_bank_from_file(path, labels=("a", "b", "c"))
    bank = build_bank_from_file(path, labels=LABELS)
    assert bank.labels == LABELS


def test_save_bank_file_validates_rows(tmp_path):
    templates = default_templates()
    with pytest.raises(ValidationError):
        save_bank_file(tmp_path / "x.eegb", LABELS, templates,
                       np.zeros((5, 16)))  # wrong row count


# -- resolve_bank -------------------------------------------------------------------

def test_resolve_bank_stub_and_file(tmp_path):
    templates = default_templates()
    stub = resolve_bank("stub", LABELS, templates, 16, 0)
    assert stub.provenance == "stub" and stub.dim == 16
    again = resolve_bank("stub", LABELS, templates, 16, 0)
    assert content_hash(stub) == content_hash(again)

    path, _ = _write_bank(tmp_path)
    from_file = resolve_bank(str(path), LABELS, templates, 16, 0)
    assert from_file.provenance == "file"
    with pytest.raises((FormatError, ValidationError)):
        resolve_bank(str(tmp_path / "missing.eegb"), LABELS, templates, 16, 0)
