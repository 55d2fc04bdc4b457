import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skelgait.data import build_protocol
from skelgait.evaluate import (
    AccuracyReport,
    EvaluationError,
    GalleryIndex,
    build_gallery,
    embed_sequences,
    evaluate,
    identify,
    render_report,
)
from skelgait.nn import NetworkConfig, build_network
from skelgait.synth import SynthConfig, generate_dataset


def test_identify_toy():
    idx = GalleryIndex(("id1", "id2"), np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert identify(idx, np.array([0.9, 0.1]))[0] == "id1"
    label, dist = identify(idx, np.array([0.0, 1.0]))
    assert (label, dist) == ("id2", 0.0)


def test_identify_tie_goes_to_smallest_label():
    idx = GalleryIndex(("b", "a"), np.array([[1.0, 0.0], [-1.0, 0.0]]))
    assert identify(idx, np.zeros(2))[0] == "a"
    idx = GalleryIndex(("010", "002"), np.array([[1.0], [-1.0]]))
    assert identify(idx, np.zeros(1))[0] == "002"


def test_gallery_errors():
    with pytest.raises(EvaluationError):
        GalleryIndex((), np.zeros((0, 4)))
    with pytest.raises(EvaluationError):
        GalleryIndex(("a",), np.zeros((2, 4)))
    idx = GalleryIndex(("a",), np.zeros((1, 4)))
    with pytest.raises(EvaluationError):
        identify(idx, np.zeros(3))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 12), dim=st.integers(1, 6))
def test_identify_orthogonal_and_permutation_invariance(seed, n, dim):
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(n, dim))
    labels = tuple(f"{k:03d}" for k in range(n))
    probe = rng.normal(size=dim)
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    base = identify(GalleryIndex(labels, emb), probe)[0]
    assert identify(GalleryIndex(labels, emb @ q.T), q @ probe)[0] == base
    perm = rng.permutation(n)
    assert identify(GalleryIndex(tuple(labels[k] for k in perm), emb[perm]), probe)[0] == base


@pytest.fixture(scope="module")
def setup():
    seqs, _ = generate_dataset(SynthConfig(num_ids=16, seqs_per_id=8, min_frames=16, max_frames=24))
    proto = build_protocol(seqs)
    model = build_network(NetworkConfig(depth="shallow", dtype="float32"), seed=0)
    return model, proto


def test_build_gallery(setup):
    model, proto = setup
    idx = build_gallery(model, proto.gallery[:8])
    assert len(idx) == 8 and idx.embeddings.shape == (8, 256)
    again = build_gallery(model, proto.gallery[:8])
    assert again.embeddings.tobytes() == idx.embeddings.tobytes()
    with pytest.raises(EvaluationError):
        build_gallery(model, [])


def test_self_match(setup):
    model, proto = setup
    report = evaluate(model, proto, gallery_as_probe=True)
    assert report.average == 1.0


def test_evaluate_matches_brute_force_recount(setup):
    model, proto = setup
    report = evaluate(model, proto)
    gal = embed_sequences(model, proto.gallery)
    gal_ids = [s.identity for s in proto.gallery]
    for cond, seqs in proto.probes.items():
        emb = embed_sequences(model, seqs)
        correct = 0
        for k, s in enumerate(seqs):
            d = [np.linalg.norm(gal[j] - emb[k]) for j in range(len(gal))]
            correct += gal_ids[int(np.argmin(d))] == s.identity
        assert report.counts[(cond, 90)] == (correct, len(seqs))
    means = [report.condition_mean(c) for c in ("NM", "BG", "CL")]
    assert report.average == pytest.approx(sum(means) / 3)


def test_evaluate_view_without_gallery(setup):
    model, proto = setup
    stray = proto.probes["BG"][0]
    stray.view = 180
    try:
        with pytest.raises(EvaluationError, match="180"):
            evaluate(model, proto)
    finally:
        stray.view = 90


def _report():
    r = AccuracyReport(["NM", "BG", "CL"], [90])
    r.counts = {("NM", 90): (15, 16), ("BG", 90): (7, 8), ("CL", 90): (5, 8)}
    return r


def test_render_text():
    text = render_report(_report())
    lines = text.splitlines()
    assert lines[0].split() == ["90°", "Mean"]
    assert lines[1].split() == ["NM", "93.8", "93.8"]
    assert lines[3].split() == ["CL", "62.5", "62.5"]
    # (0.9375 + 0.875 + 0.625) / 3
    assert lines[4].split() == ["Average", "81.2", "81.2"]
    assert render_report(_report()) == text


def test_render_csv():
    rows = list(csv.reader(io.StringIO(render_report(_report(), "csv"))))
    assert rows[0] == ["condition", "90", "Mean"]
    assert len(rows) == 5
    assert sum(len(r) - 1 for r in rows[1:4]) == 3 * 2
    assert rows[2] == ["BG", "87.5", "87.5"]
    with pytest.raises(ValueError):
        render_report(_report(), "html")
