import filecmp
import json

import numpy as np
import pytest

from polypdiff.codec import binarize, decode_pred, encode_mask
from polypdiff.data import (
    DatasetError, SyntheticConfig, box_to_pixels, clip_indices, generate_synthetic, load_dataset,
    render_negative_frame, sample_clip, tight_box,
)

CFG = SyntheticConfig(n_cases=10, frames_per_case=8, hard_fraction=0.5)


@pytest.fixture(scope="module")
def root(tmp_path_factory):
    return generate_synthetic(CFG, tmp_path_factory.mktemp("ds") / "root", seed=11)


@pytest.fixture(scope="module")
def index(root):
    return load_dataset(root)


def _tree_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(_tree_equal(a / d, b / d) for d in cmp.common_dirs)


def test_generation_is_deterministic(tmp_path):
    cfg = SyntheticConfig(n_cases=2, frames_per_case=10)
    a = generate_synthetic(cfg, tmp_path / "a", seed=7)
    b = generate_synthetic(cfg, tmp_path / "b", seed=7)
    assert _tree_equal(a, b)
    c = generate_synthetic(cfg, tmp_path / "c", seed=8)
    assert not _tree_equal(a, c)


def test_invalid_sizes(tmp_path):
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticConfig(height=48), tmp_path, seed=0)
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticConfig(frames_per_case=1), tmp_path, seed=0)


def test_index_counts_and_tags(index):
    assert len(index.lineages) == CFG.n_cases
    splits = {c.split for c in index.by_role("test")}
    assert splits <= {"easy-seen", "easy-unseen", "hard-seen", "hard-unseen"}
    for c in index.by_role("test"):
        assert c.difficulty in ("easy", "hard") and c.visibility in ("seen", "unseen")
    counts = index.counts()
    assert counts["train"] == sum(c.n_frames for c in index.by_role("train"))


def test_tag_partition_matches_manifest(root, index):
    manifest = json.loads((root / "splits.json").read_text())["cases"]
    test_ids = [c.case_id for c in index.by_role("test")]
    assert sorted(test_ids) == sorted(k for k, v in manifest.items() if v["role"] == "test")
    for c in index.by_role("test"):
        assert c.split == f"{manifest[c.case_id]['difficulty']}-{manifest[c.case_id]['visibility']}"


def test_lineage_and_disjointness(index):
    train = {c.lineage for c in index.by_role("train")}
    for c in index.by_role("test"):
        assert (c.lineage in train) == (c.visibility == "seen")
    frames_train = {str(p) for c in index.by_role("train") for p in c.frame_paths}
    frames_test = {str(p) for c in index.by_role("test") for p in c.frame_paths}
    assert frames_train.isdisjoint(frames_test)


def test_boxes_are_tight(index):
    for c in index.cases:
        masks = c.masks()
        for ann, m in zip(c.annotations, masks):
            assert ann["box"] == pytest.approx(tight_box(m))
            r0, r1, c0, c1 = box_to_pixels(ann["box"], *m.shape)
            rows, cols = np.flatnonzero(m.any(1)), np.flatnonzero(m.any(0))
            assert (r0, r1, c0, c1) == (rows[0], rows[-1] + 1, cols[0], cols[-1] + 1)


def test_easy_contrast_exceeds_hard(index):
    gaps = {"easy": [], "hard": []}
    for c in index.cases:
        f = c.frames().astype(float)
        m = c.masks()
        for fr, mk in zip(f, m):
            gaps[c.difficulty].append(np.abs(fr[mk].mean(0) - fr[~mk].mean(0)).mean())
    assert np.mean(gaps["easy"]) >= 2 * np.mean(gaps["hard"])


def test_class_is_constant_per_case(index):
    for c in index.cases:
        assert {a["class_id"] for a in c.annotations} == {c.class_id}


def test_missing_mask_is_reported(tmp_path):
    root = generate_synthetic(SyntheticConfig(n_cases=2, frames_per_case=4), tmp_path / "r", seed=1)
    victim = sorted(root.glob("*/*/GT/00002.png"))[0]
    victim.unlink()
    with pytest.raises(DatasetError, match="00002.png"):
        load_dataset(root)


def test_malformed_annotation_reports_line(tmp_path):
    root = generate_synthetic(SyntheticConfig(n_cases=2, frames_per_case=4), tmp_path / "r", seed=1)
    ann = sorted(root.glob("*/*/annotations.jsonl"))[0]
    lines = ann.read_text().splitlines()
    lines[2] = '{"frame": "00002", "class_id": 1}'
    ann.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match=r"annotations.jsonl:3"):
        load_dataset(root)


def test_clip_shapes_padding_and_alignment(index):
    case = index.by_role("train")[0]
    clip = sample_clip(index, case.case_id, 0, delta=4)
    assert clip.prev.shape == (4, 3, 64, 64) and clip.target.shape == (3, 64, 64)
    assert clip.target.min() >= -1 and clip.target.max() <= 1
    for k in range(4):
        np.testing.assert_array_equal(clip.prev[k], clip.target)
    clip5 = sample_clip(index, case.case_id, 5, delta=4)
    np.testing.assert_array_equal(clip5.mask, case.masks()[5])
    assert list(clip5.box) == pytest.approx(case.annotations[5]["box"])
    assert clip_indices(5, 4) == [1, 2, 3, 4] and clip_indices(1, 3) == [0, 0, 0]
    with pytest.raises(KeyError):
        sample_clip(index, case.case_id, case.n_frames)
    with pytest.raises(KeyError):
        sample_clip(index, "nope", 0)


def test_clip_resize_keeps_tight_box(index):
    case = index.by_role("train")[0]
    clip = sample_clip(index, case.case_id, 3, delta=2, size=32)
    assert clip.target.shape == (3, 32, 32) and clip.mask.shape == (32, 32)
    assert list(clip.box) == pytest.approx(tight_box(clip.mask))


def test_codec_round_trip_on_block_masks(index):
    m = index.cases[0].masks()[0]
    block = np.kron(m.reshape(16, 4, 16, 4).any(axis=(1, 3)), np.ones((4, 4), bool)).astype(np.uint8)
    np.testing.assert_array_equal(binarize(decode_pred(encode_mask(block))), block)


def test_negative_frame_is_background():
    f = render_negative_frame(CFG, seed=3)
    assert f.shape == (64, 64, 3) and f.dtype == np.uint8
