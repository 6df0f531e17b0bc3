import json

import numpy as np
import pytest

from patch_actor.errors import GenerationFailed, SchemaError, UnsupportedVersion
from patch_actor.geometry import make_grid, rasterize_bbox
from patch_actor.synthgui import (
    GroundingRecord,
    dumps_records,
    encode,
    encode_record,
    gen_dataset,
    gen_screen,
    gen_verifier_data,
    init_encoder,
    read_records,
    read_verifier_data,
    records_digest,
    write_records,
    write_verifier_data,
)

GRID = make_grid(448, 336, 28)


def test_gen_screen_deterministic():
    a = gen_screen(7, GRID, 1, 8)
    b = gen_screen(7, GRID, 1, 8)
    assert a == b
    assert len(a.elements) == 1


def test_gen_screen_disjoint_masks():
    s = gen_screen(7, GRID, 5, 8)
    masks = [rasterize_bbox(el.bbox, GRID).bits for el in s.elements]
    assert len(masks) == 5
    assert np.sum(masks, axis=0).max() == 1
    assert len({el.cls for el in s.elements}) == 5


def test_gen_screen_pigeonhole():
    with pytest.raises(GenerationFailed):
        gen_screen(3, make_grid(28, 28, 28), 2, 8)


def test_too_many_elements_for_classes():
    with pytest.raises(GenerationFailed):
        gen_screen(3, GRID, 9, 8)


def test_adjacent_layout_touches():
    s = gen_screen(11, GRID, 6, 8, adjacent=True)
    masks = [rasterize_bbox(el.bbox, GRID).as_2d() for el in s.elements]
    for k in range(1, len(masks)):
        prev = np.any(masks[:k], axis=0)
        m = masks[k]
        grown = m.copy()
        grown[1:] |= m[:-1]
        grown[:-1] |= m[1:]
        grown[:, 1:] |= m[:, :-1]
        grown[:, :-1] |= m[:, 1:]
        assert (grown & prev).any()


def test_element_patch_centers_inside_box():
    # every covered patch center lies inside the element box, so clicks on
    # any positive patch count as hits
    for seed in range(20):
        s = gen_screen(seed, GRID, 5, 8)
        for el in s.elements:
            for i in np.flatnonzero(rasterize_bbox(el.bbox, GRID).bits):
                r, c = divmod(i, GRID.cols)
                assert el.bbox.contains((c + 0.5) * 28 / 448, (r + 0.5) * 28 / 336)


def test_encode_zero_noise():
    s = gen_screen(5, GRID, 3, 8, noise_scale=0.0)
    enc = init_encoder(8, 16, 0)
    fs = encode(s, s.elements[0].cls, enc)
    cmap = s.class_map()
    idx = np.flatnonzero(cmap == s.elements[0].cls)
    if len(idx) > 1:
        assert np.array_equal(fs.patch_features[idx[0]], fs.patch_features[idx[1]])
    # distinct classes, distinct vectors
    reps = {c: fs.patch_features[np.flatnonzero(cmap == c)[0]] for c in np.unique(cmap)}
    vecs = list(reps.values())
    for i in range(len(vecs)):
        for j in range(i + 1, len(vecs)):
            assert not np.array_equal(vecs[i], vecs[j])


def test_encode_anchor_depends_only_on_instruction():
    s = gen_screen(5, GRID, 3, 8)
    enc = init_encoder(8, 16, 0)
    a = encode(s, s.elements[0].cls, enc)
    b = encode(s, s.elements[1].cls, enc)
    assert np.array_equal(a.patch_features, b.patch_features)
    assert not np.array_equal(a.anchor, b.anchor)


def test_gen_dataset_counts():
    recs = gen_dataset(1, 10, GRID, 5, 8)
    assert len(recs) == 50
    for r in recs:
        assert rasterize_bbox(r.gt_bbox, r.grid).count >= 1
        assert r.instruction in {el.cls for el in r.screen.elements}


def test_gen_dataset_range_of_elements():
    recs = gen_dataset(4, 30, GRID, (3, 6), 8)
    per_screen = {}
    for r in recs:
        per_screen[r.screen.seed] = len(r.screen.elements)
    assert set(per_screen.values()) <= {3, 4, 5, 6}
    assert len(set(per_screen.values())) > 1


def test_gen_dataset_seeds_differ():
    digests = {records_digest(gen_dataset(s, 5, GRID, 4, 8)) for s in range(6)}
    assert len(digests) == 6


def test_serialization_deterministic_and_roundtrip(tmp_path):
    recs = gen_dataset(3, 4, GRID, 4, 8)
    assert dumps_records(recs) == dumps_records(gen_dataset(3, 4, GRID, 4, 8))
    path = tmp_path / "r.jsonl"
    write_records(path, recs)
    first = path.read_text().splitlines()[0]
    assert json.loads(first) == {"schema": "patch-actor/records/v1"}
    back, bad = read_records(path)
    assert bad == []
    assert dumps_records(back) == dumps_records(recs)
    assert [r.uid for r in back] == [r.uid for r in recs]


def test_record_line_schema():
    rec = gen_dataset(3, 1, GRID, 2, 8)[0]
    obj = rec.to_json()
    for key in ("seed", "grid", "elements", "instruction", "gt_bbox"):
        assert key in obj
    assert set(obj["grid"]) >= {"cols", "rows", "patch_px"}
    assert set(obj["elements"][0]) == {"class", "bbox"}


def test_reader_rejects_wrong_schema(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text('{"schema":"patch-actor/records/v9"}\n')
    with pytest.raises(UnsupportedVersion):
        read_records(p)
    p.write_text("")
    with pytest.raises(SchemaError):
        read_records(p)


def test_reader_skips_malformed_lines(tmp_path):
    recs = gen_dataset(3, 2, GRID, 2, 8)
    text = dumps_records(recs).splitlines()
    text.insert(2, '{"grid": {"cols": 16}}')
    text.insert(3, "not json")
    p = tmp_path / "r.jsonl"
    p.write_text("\n".join(text) + "\n")
    back, bad = read_records(p)
    assert len(back) == 4
    assert bad == [1, 2]
    with pytest.raises(SchemaError):
        read_records(p, strict=True)


def test_external_record_with_precomputed_features():
    rng = np.random.default_rng(0)
    g = make_grid(56, 56, 28)
    obj = {
        "grid": {"cols": 2, "rows": 2, "patch_px": 28},
        "image_path": "shot.png",
        "patch_features": rng.normal(size=(4, 8)).tolist(),
        "anchor": rng.normal(size=8).tolist(),
        "instruction": "click the save button",
        "gt_bbox": [0.0, 0.0, 0.5, 0.5],
    }
    rec = GroundingRecord.from_json(obj)
    assert rec.screen is None and rec.grid == g
    fs = encode_record(rec, init_encoder(8, 8, 0))
    assert np.array_equal(fs.patch_features, np.asarray(obj["patch_features"]))
    assert np.array_equal(fs.anchor, np.asarray(obj["anchor"]))
    assert GroundingRecord.from_json(rec.to_json()).uid == rec.uid


def test_verifier_data_strategies():
    two = gen_dataset(9, 3, GRID, 2, 8)
    ex = gen_verifier_data(two, 0)
    assert len(ex) == 2 * len(two)
    for rec, pos, neg in zip(two, ex[::2], ex[1::2]):
        assert pos.label and not neg.label
        w, h = rec.image_dims
        cx, cy = rec.gt_bbox.center()
        assert pos.marked_point == (cx * w, cy * h)
        other = [el for el in rec.screen.elements if el.bbox != rec.gt_bbox][0]
        ox, oy = other.bbox.center()
        assert neg.marked_point == (ox * w, oy * h)


def test_verifier_data_single_element_samples_outside():
    one = gen_dataset(9, 20, GRID, 1, 8)
    ex = gen_verifier_data(one, 0)
    assert sum(e.label for e in ex) == sum(not e.label for e in ex) == 20
    for e in ex:
        w, h = e.record.image_dims
        assert e.label == e.record.gt_bbox.contains(e.marked_point[0] / w, e.marked_point[1] / h)


def test_verifier_data_roundtrip(tmp_path):
    ex = gen_verifier_data(gen_dataset(9, 2, GRID, 3, 8), 1)
    p = tmp_path / "v.jsonl"
    write_verifier_data(p, ex)
    back, bad = read_verifier_data(p)
    assert bad == []
    assert [(b.marked_point, b.label) for b in back] == [(e.marked_point, e.label) for e in ex]
