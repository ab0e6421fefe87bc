import numpy as np
import pytest
from scipy import ndimage

from prefdiff import datapipe as dp
from prefdiff import toyworld as tw


def test_sample_caption_color_frequencies_uniform():
    counts = {c: 0 for c in tw.COLORS}
    n = 10_000
    for i in range(n):
        cap = dp.sample_caption("color", rng_seed=i)
        counts[cap.objects[0].color] += 1
    expected = n / len(tw.COLORS)
    sigma = np.sqrt(n * (1 / 8) * (7 / 8))
    for color, got in counts.items():
        assert abs(got - expected) <= 3 * sigma, f"{color}: {got}"


def test_sample_caption_spatial_structure():
    for i in range(50):
        cap = dp.sample_caption("spatial", rng_seed=i)
        assert len(cap.objects) == 2
        assert cap.relation in tw.RELATIONS


def test_sample_caption_deterministic_and_excludable():
    a = dp.sample_caption("texture", rng_seed=5)
    b = dp.sample_caption("texture", rng_seed=5)
    assert a == b
    c = dp.sample_caption("texture", rng_seed=5, exclude={a})
    assert c != a
    with pytest.raises(ValueError, match="unsupported"):
        dp.sample_caption("aesthetics", rng_seed=0)


def test_parse_dimension_priority_ladder():
    spatial_with_colors = tw.Caption(
        dimension="spatial", relation="above",
        objects=(tw.ObjectSlot("square", color="red"),
                 tw.ObjectSlot("disc", color="blue")))
    assert dp.parse_dimension(spatial_with_colors) == "spatial"

    numeracy_with_texture = tw.Caption(
        dimension="numeracy", count=3,
        objects=(tw.ObjectSlot("square", texture="checker"),))
    assert dp.parse_dimension(numeracy_with_texture) == "numeracy"

    color_only = tw.Caption(dimension="color",
                            objects=(tw.ObjectSlot("square", color="red"),))
    assert dp.parse_dimension(color_only) == "color"


def test_edit_caption_two_object_color_augmentations():
    cap = tw.Caption(dimension="color",
                     objects=(tw.ObjectSlot("square", color="red"),
                              tw.ObjectSlot("disc", color="blue")))
    edits = dp.edit_caption(cap, rng_seed=0)
    assert len(edits) == 4
    captions = [e for e, _ in edits]
    assert len(set(captions)) == 4
    assert all(c != cap for c in captions)
    swap = tw.Caption(dimension="color",
                      objects=(tw.ObjectSlot("square", color="blue"),
                               tw.ObjectSlot("disc", color="red")))
    rep_fwd = tw.Caption(dimension="color",
                         objects=(tw.ObjectSlot("square", color="red"),
                                  tw.ObjectSlot("disc", color="red")))
    rep_back = tw.Caption(dimension="color",
                          objects=(tw.ObjectSlot("square", color="blue"),
                                   tw.ObjectSlot("disc", color="blue")))
    assert swap in captions and rep_fwd in captions and rep_back in captions
    by_caption = dict((c, idx) for c, idx in edits)
    assert by_caption[swap] == frozenset({0, 1})
    assert by_caption[rep_fwd] == frozenset({1})
    assert by_caption[rep_back] == frozenset({0})


def test_edit_caption_single_object_has_one_edit():
    cap = tw.Caption(dimension="color", objects=(tw.ObjectSlot("square", color="red"),))
    edits = dp.edit_caption(cap, rng_seed=1)
    assert len(edits) == 1
    edited, idx = edits[0]
    assert idx == frozenset({0})
    assert edited.objects[0].color != "red"


def test_edit_caption_equal_attributes_skips_augmentation():
    cap = tw.Caption(dimension="color",
                     objects=(tw.ObjectSlot("square", color="red"),
                              tw.ObjectSlot("disc", color="red")))
    assert len(dp.edit_caption(cap, rng_seed=2)) == 1


def test_edit_caption_spatial_flips_relation():
    cap = tw.Caption(dimension="spatial", relation="left-of",
                     objects=(tw.ObjectSlot("square"), tw.ObjectSlot("disc")))
    edits = dp.edit_caption(cap, rng_seed=3)
    assert len(edits) == 1
    assert edits[0][0].relation == "right-of"
    assert edits[0][1] == frozenset({0, 1})
    above = tw.Caption(dimension="spatial", relation="above",
                       objects=(tw.ObjectSlot("square"), tw.ObjectSlot("disc")))
    assert dp.edit_caption(above, rng_seed=4)[0][0].relation == "below"


def test_edit_caption_numeracy_changes_count():
    cap = tw.Caption(dimension="numeracy", count=3, objects=(tw.ObjectSlot("disc"),))
    edited, _ = dp.edit_caption(cap, rng_seed=5)[0]
    assert edited.count in (2, 4)


def test_build_pair_color_background_unchanged():
    cap = tw.Caption(dimension="color",
                     objects=(tw.ObjectSlot("square", color="red"),
                              tw.ObjectSlot("disc", color="blue")))
    edits = dp.edit_caption(cap, rng_seed=6)
    jitter = 0.05
    pair = dp.build_pair(cap, edits[0], layout_seed=11, jitter=jitter)
    outside = np.ones((16, 16), dtype=bool)
    for scene in (pair.scene_w, pair.scene_l):
        for o in scene.objects:
            outside[o.bbox.row0:o.bbox.row1, o.bbox.col0:o.bbox.col1] = False
    diff = np.abs(pair.x0_w - pair.x0_l)[outside]
    assert diff.max() <= 2 * jitter


def test_build_pair_spatial_exchanges_bboxes():
    cap = tw.Caption(dimension="spatial", relation="left-of",
                     objects=(tw.ObjectSlot("square"), tw.ObjectSlot("disc")))
    edits = dp.edit_caption(cap, rng_seed=7)
    pair = dp.build_pair(cap, edits[0], layout_seed=13)
    boxes_w = {o.bbox for o in pair.scene_w.objects}
    boxes_l = {o.bbox for o in pair.scene_l.objects}
    assert boxes_w == boxes_l
    # attributes moved across the boxes: same shapes, swapped positions
    by_box_w = {o.bbox: o.shape for o in pair.scene_w.objects}
    by_box_l = {o.bbox: o.shape for o in pair.scene_l.objects}
    assert by_box_w != by_box_l
    assert sorted(by_box_w.values()) == sorted(by_box_l.values())


def test_build_pair_numeracy_component_counts():
    cap = tw.Caption(dimension="numeracy", count=2, objects=(tw.ObjectSlot("square"),))
    edit = (tw.Caption(dimension="numeracy", count=3, objects=(tw.ObjectSlot("square"),)),
            frozenset({0}))
    pair = dp.build_pair(cap, edit, layout_seed=17)
    # independent component-count oracle: threshold and label
    for img, expected in ((pair.x0_w, 2), (pair.x0_l, 3)):
        blobs = np.abs(img).max(axis=2) > 0.3
        _, n = ndimage.label(blobs)
        assert n == expected


def test_build_pair_four_way_cross_check_enforced():
    cap = tw.Caption(dimension="shape",
                     objects=(tw.ObjectSlot("square"), tw.ObjectSlot("disc")))
    swap = (tw.Caption(dimension="shape",
                       objects=(tw.ObjectSlot("disc"), tw.ObjectSlot("square"))),
            frozenset({0, 1}))
    # a bare-shape swap is order-only, so the cross-check must reject it
    with pytest.raises(dp.VqaInconsistencyError):
        dp.build_pair(cap, swap, layout_seed=19)


def test_generate_dataset_counts_and_reproducibility():
    counts = {"color": 8, "spatial": 4}
    pairs_a, man_a = dp.generate_dataset(counts, seed=21)
    pairs_b, man_b = dp.generate_dataset(counts, seed=21)
    assert man_a.realized == {"color": 8, "spatial": 4}
    assert man_a.realized == man_b.realized
    assert man_a.config_hash == man_b.config_hash
    assert man_a.filter_stats == man_b.filter_stats
    assert all(dp.pairs_equal(x, y) for x, y in zip(pairs_a, pairs_b))
    assert sum(man_a.realized.values()) <= sum(man_a.requested.values())
    for p in pairs_a:
        assert p.y_w != p.y_l


def test_generate_dataset_respects_exclusions():
    reserved = {dp.sample_caption("color", rng_seed=i) for i in range(30)}
    pairs, _ = dp.generate_dataset({"color": 10}, seed=23, exclude_captions=reserved)
    assert all(p.y_w not in reserved for p in pairs)


def test_filter_pairs_clean_input_all_kept():
    pairs, _ = dp.generate_dataset({"color": 10}, seed=25)
    kept, discarded, stats = dp.filter_pairs(pairs, corruption_rate=0.0)
    assert len(kept) == 10 and not discarded
    assert stats["injected"] == 0


def test_filter_pairs_discards_exactly_the_injected():
    pairs, _ = dp.generate_dataset({"color": 15, "numeracy": 10}, seed=27)
    kept, discarded, stats = dp.filter_pairs(pairs, corruption_rate=0.3, rng_seed=1)
    assert len(discarded) == stats["injected"] > 0
    assert len(kept) + len(discarded) == 25


def test_filter_pairs_empty_input():
    kept, discarded, stats = dp.filter_pairs([], corruption_rate=0.5)
    assert kept == [] and discarded == []
    assert stats["injected"] == 0 and stats["per_dimension"] == {}


def test_dataset_round_trip_structural_equality(tmp_path):
    counts = {"color": 4, "shape": 2, "texture": 2, "spatial": 2, "numeracy": 2}
    pairs, manifest = dp.generate_dataset(counts, seed=29)
    path = tmp_path / "data.jsonl"
    dp.write_dataset(pairs, manifest, path)
    loaded, man2 = dp.read_dataset(path)
    assert len(loaded) == len(pairs)
    assert all(dp.pairs_equal(a, b) for a, b in zip(pairs, loaded))
    assert man2.realized == manifest.realized
    assert man2.config_hash == manifest.config_hash
    assert sum(man2.realized.values()) == len(loaded)


def test_dataset_truncation_reports_line(tmp_path):
    pairs, manifest = dp.generate_dataset({"color": 3}, seed=31)
    path = tmp_path / "data.jsonl"
    dp.write_dataset(pairs, manifest, path)
    text = path.read_text().split("\n")
    (tmp_path / "cut.jsonl").write_text("\n".join(text[:2]) + "\n" + text[2][:40] + "\n")
    with pytest.raises(dp.MalformedRecordError, match="line 3"):
        dp.read_dataset(tmp_path / "cut.jsonl")
    # clean truncation at a record boundary is caught by the record count
    (tmp_path / "cut2.jsonl").write_text("\n".join(text[:3]) + "\n")
    with pytest.raises(dp.MalformedRecordError, match="expected 3 records"):
        dp.read_dataset(tmp_path / "cut2.jsonl")


def test_dataset_version_and_checksum_errors(tmp_path):
    import json
    pairs, manifest = dp.generate_dataset({"color": 2}, seed=33)
    path = tmp_path / "data.jsonl"
    dp.write_dataset(pairs, manifest, path)
    lines = path.read_text().split("\n")
    header = json.loads(lines[0])
    header["version"] = 99
    (tmp_path / "v.jsonl").write_text("\n".join([json.dumps(header)] + lines[1:]))
    with pytest.raises(dp.DatasetVersionError):
        dp.read_dataset(tmp_path / "v.jsonl")
    tampered = lines[:]
    tampered[1] = tampered[1].replace("color", "colou"[:5])  # same length, new bytes
    (tmp_path / "c.jsonl").write_text("\n".join(tampered))
    with pytest.raises((dp.DatasetChecksumError, dp.MalformedRecordError)):
        dp.read_dataset(tmp_path / "c.jsonl")


def test_default_mix_sums_to_total():
    counts = dp.default_mix(2000)
    assert sum(counts.values()) == 2000
    assert counts["color"] > counts["shape"]
