import filecmp
import json
import time

import numpy as np
import pytest
from scipy import ndimage

from fslab.datamodel import ContractError, load_clip
from fslab.synthdata import (
    SceneSpec,
    ShapeSpec,
    SpecError,
    Texture,
    build_corpus,
    load_manifest,
    random_scene,
    render_clip,
    split_counts,
)


def _disk_scene(velocity=(1.0, 0.0), jitter=0.0, n_frames=4):
    disk = ShapeSpec("disk", (20.0, 20.0), (6.0,), velocity=velocity, texture=Texture((0.9, 0.2, 0.1), 0.2, (0.3, 0.1)))
    return SceneSpec(0, n_frames, 40, 40, [disk], jitter=jitter)


def test_translating_disk_has_exact_flow():
    clip = render_clip(_disk_scene())
    for t, flow in enumerate(clip.flows):
        inside = clip.masks[t][0].astype(bool)
        np.testing.assert_allclose(flow[0][inside], 1.0, atol=1e-6)
        np.testing.assert_allclose(flow[1][inside], 0.0, atol=1e-6)
        assert np.all(flow[:, ~inside] == 0)


def test_zero_velocity_gives_zero_flow_and_identical_frames():
    clip = render_clip(_disk_scene(velocity=(0.0, 0.0)))
    assert all(np.all(f == 0) for f in clip.flows)
    assert all(np.array_equal(clip.frames[0], f) for f in clip.frames[1:])


def test_masks_are_binary_foreground_support():
    clip = render_clip(random_scene(3))
    for m, lab in zip(clip.masks, clip.labels):
        assert set(np.unique(m)) <= {0, 1}
        np.testing.assert_array_equal(m[0], (lab > 0).astype(np.uint8))


def _warp_error(clip):
    """Sample frame t+1 at p + M_t(p) and compare with frame t on stable interior pixels."""
    errors = []
    for t, flow in enumerate(clip.flows):
        lab0, lab1 = clip.labels[t], clip.labels[t + 1]
        h, w = lab0.shape
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        ty, tx = ys + flow[1], xs + flow[0]
        # away from label edges at t, and landing on the same label at t+1
        uniform = ndimage.minimum_filter(lab0, 5) == ndimage.maximum_filter(lab0, 5)
        ri = np.clip(np.rint(ty).astype(int), 0, h - 1)
        rj = np.clip(np.rint(tx).astype(int), 0, w - 1)
        ok = uniform & (lab1[ri, rj] == lab0) & (tx > 2) & (tx < w - 3) & (ty > 2) & (ty < h - 3)
        for c in range(3):
            warped = ndimage.map_coordinates(clip.frames[t + 1][c], [ty, tx], order=1, mode="nearest")
            errors.append(np.abs(warped - clip.frames[t][c])[ok])
    return float(np.mean(np.concatenate(errors)))


@pytest.mark.parametrize("seed", range(6))
def test_flow_warps_frame_onto_next(seed):
    assert _warp_error(render_clip(random_scene(seed))) < 0.02


def test_shapes_leaving_canvas_are_rejected():
    spec = _disk_scene(velocity=(10.0, 0.0), n_frames=5)
    with pytest.raises(SpecError):
        render_clip(spec)
    with pytest.raises(SpecError):
        SceneSpec(0, 1, 40, 40, [ShapeSpec("disk", (20.0, 20.0), (3.0,))]).validate()


def test_random_scene_is_deterministic():
    a, b = render_clip(random_scene(11)), render_clip(random_scene(11))
    assert all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))
    assert all(np.array_equal(x, y) for x, y in zip(a.flows, b.flows))


def test_last_frame_is_dropped():
    clip = render_clip(random_scene(2, n_frames=5))
    assert len(clip.frames) == 5 and len(clip.flows) == 4
    assert [s.t for s in clip.samples("c")] == [0, 1, 2, 3]


def test_split_counts():
    assert split_counts(40, {"pretrain-spatial": 0.175, "pretrain-temporal": 0.175, "train": 0.5, "val": 0.15}) == {
        "pretrain-spatial": 7,
        "pretrain-temporal": 7,
        "train": 20,
        "val": 6,
    }
    with pytest.raises(ContractError):
        split_counts(10, {"train": 0.5, "val": 0.4})


def _same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(_same_tree(a / d, b / d) for d in cmp.common_dirs)


def test_corpus_is_byte_identical_for_same_seed(tmp_path):
    build_corpus(4, tmp_path / "a", seed=5, n_frames=3, size=32)
    build_corpus(4, tmp_path / "b", seed=5, n_frames=3, size=32)
    assert _same_tree(tmp_path / "a", tmp_path / "b")


def test_corpus_refuses_non_empty_directory(tmp_path):
    build_corpus(2, tmp_path, seed=0, n_frames=2, size=32)
    with pytest.raises(FileExistsError):
        build_corpus(2, tmp_path, seed=0, n_frames=2, size=32)
    build_corpus(2, tmp_path, seed=1, n_frames=2, size=32, force=True)
    assert load_manifest(tmp_path)["seed"] == 1


def test_corpus_layout_and_manifest(tmp_path):
    manifest = build_corpus(6, tmp_path, seed=0, n_frames=3, size=32)
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk["splits"] == manifest["splits"]
    ids = [c for v in manifest["splits"].values() for c in v]
    assert len(ids) == len(set(ids)) == 6
    samples = load_clip(tmp_path / ids[0])
    assert len(samples) == 2 and samples[0].size == (32, 32)


def test_twenty_clip_corpus_renders_within_budget(tmp_path):
    t0 = time.perf_counter()
    build_corpus(20, tmp_path, seed=0, size=64, n_frames=8)
    assert time.perf_counter() - t0 < 60
