"""Exercise the tilevote extension end to end on tiny inputs.

    pip install --no-build-isolation -e crates/python
    python python/smoke_test.py
"""

import os
import tempfile

import tilevote


def main():
    rects = tilevote.compute_grid(600, 800, 6, 7)
    assert len(rects) == 42
    assert rects[-1][:2] == (5, 6)
    assert all(w == 114 and h == 100 for (_, _, _, _, w, h) in rects)

    tid = tilevote.tile_id("img_003", 2, 5)
    assert tid == "img_003_r02c05"
    assert tilevote.parse_tile_id(tid) == ("img_003", 2, 5)

    img = tilevote.synthetic_image(1, 0, height=60, width=80, seed=7)
    assert len(img) == 60 and len(img[0]) == 80
    tiles = tilevote.tile_image(img, 2, 2, source_id="s")
    assert [t[0] for t in tiles] == ["s_r00c00", "s_r00c01", "s_r01c00", "s_r01c01"]
    assert len(tiles[0][1]) == 30 and len(tiles[0][1][0]) == 40
    small = tilevote.resize_bilinear(img, 16, 16)
    assert len(small) == 16

    scores = [[0.1, 0.6, 0.2, 0.1], [0.5, 0.3, 0.1, 0.1], [0.2, 0.5, 0.2, 0.1]]
    assert tilevote.majority_vote([1, 0, 1], scores) == 1
    assert tilevote.probability_vote(scores) == 1
    assert tilevote.probability_vote(scores, reduction="mean") == 1

    m = tilevote.compute_metrics([0, 1, 2, 3, 1], [0, 1, 2, 3, 2])
    assert abs(m["accuracy"] - 0.8) < 1e-12
    assert m["confusion"][2][1] == 1

    acc = tilevote.simulate_vote_accuracy(0.6, 42, 2000, method="majority", seed=1)
    assert acc > 0.9, acc

    index = tilevote.KnnIndex([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]], [0, 0, 3, 3], k=3)
    assert len(index) == 4
    label, knn_scores, nbrs = index.classify([4.9, 5.0])
    assert label == 3 and nbrs[0][0] == 2
    assert abs(sum(knn_scores) - 1.0) < 1e-12

    model = tilevote.Model(input_size=32, widths=[4, 8], stem_kernel=3, stem_stride=2,
                           blocks_per_stage=1, embedding_size=16, seed=3)
    probs, emb = model.predict(tiles[0][1])
    assert len(probs) == len(tilevote.CLASS_NAMES) and abs(sum(probs) - 1.0) < 1e-5
    assert len(emb) == 16
    for method in ("gradcam", "scorecam"):
        cam = model.saliency(tiles[0][1], 1, method=method)
        assert len(cam) == 32 and len(cam[0]) == 32
        flat = [v for row in cam for v in row]
        assert min(flat) >= 0.0 and max(flat) <= 1.0

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "checkpoint.bin")
        model.save(path)
        again = tilevote.Model.load(path)
        assert again.input_size == 32
        assert again.predict(tiles[0][1])[0] == probs

    try:
        tilevote.compute_grid(5, 5, 6, 1)
    except Exception as e:
        assert "grid" in str(e).lower(), e
    else:
        raise AssertionError("oversized grid accepted")

    print(f"tilevote {tilevote.__version__} smoke test ok")


if __name__ == "__main__":
    main()
