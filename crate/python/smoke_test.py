"""Smoke test for the hrtf_sphconv Python extension.

Build and install first, e.g.

    pip install maturin
    maturin build --release -m crates/py/Cargo.toml
    pip install target/wheels/hrtf_sphconv-*.whl

then run `python python/smoke_test.py`.
"""

import math
import random
import sys
import tempfile
from pathlib import Path

import hrtf_sphconv as hs


def max_abs_diff(a, b):
    return max(abs(x - y) for ra, rb in zip(a, b) for x, y in zip(ra, rb))


def check_transforms():
    order = 4
    grid = hs.Grid.fibonacci(2 * (order + 1) ** 2)
    assert len(grid) == 50
    assert len(grid.hash()) == 64
    rng = random.Random(0)
    coeffs = [[rng.uniform(-1, 1) for _ in range(2)] for _ in range((order + 1) ** 2)]
    field = hs.isht(coeffs, grid, order)
    back = hs.sht(field, grid, order)
    assert max_abs_diff(back, coeffs) < 1e-9

    y00 = hs.real_sh(0, 0, 0.3, 1.2)
    assert abs(y00 - 1 / (2 * math.sqrt(math.pi))) < 1e-12

    beta = [rng.uniform(-1, 1) for _ in range(order + 1)]
    angle = 0.7
    mono = [[row[0]] for row in coeffs]
    f = hs.isht(mono, grid, order)
    lhs = hs.isht(hs.spectral_convolve(hs.sht(hs.rotate_z(f, grid, angle, order), grid, order), beta), grid, order)
    rhs = hs.rotate_z(hs.isht(hs.spectral_convolve(mono, beta), grid, order), grid, angle, order)
    assert max_abs_diff(lhs, rhs) < 1e-9


def check_lsd_and_baseline():
    grid = hs.Grid.fibonacci(30)
    h = [[float(i + j) for j in range(3)] for i in range(30)]
    shifted = [[v + 2.0 for v in row] for row in h]
    assert abs(hs.lsd(h, shifted) - 2.0) < 1e-12
    assert hs.lsd_unknown(shifted, h, [1, 2, 3]) == 2.0

    dense = hs.Grid.fibonacci(120)
    known_idx = list(range(0, 120, 2))
    known = dense.subset(known_idx)
    truth = hs.isht([[1.0], [0.5], [-0.25], [0.1]], dense, 1)
    pred = hs.sh_baseline([truth[i] for i in known_idx], known, 1, dense)
    assert max_abs_diff(pred, truth) < 1e-9

    try:
        hs.lsd([[1.0, 2.0]], [[1.0]])
    except hs.HrtfError as e:
        assert "dimension-mismatch" in str(e)
    else:
        raise AssertionError("shape mismatch was not rejected")


def check_pipeline():
    cfg = hs.Config(
        """
seed = 3
threads = 1
[grid]
dense_points = 48
known_points = 20
[dataset]
subjects = 4
bins = 3
gt_order = 4
proportions = [2, 1, 1]
[model]
n_map_in = 2
n_conv = 2
n_map_out = 2
[train]
max_epochs = 3
batch_size = 2
[eval]
baseline_order = 2
slice_tolerance = 0.5
"""
    )
    try:
        hs.Config("[dataset]\nsubjects = 2\n")
    except hs.HrtfError as e:
        assert "dataset.subjects" in str(e)
    else:
        raise AssertionError("two subjects were accepted")

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        split = hs.generate(cfg, root / "data")
        assert len(split["train"]) == 2 and len(split["test"]) == 1
        summary = hs.train(cfg, root / "data", root / "run")
        assert summary["epochs_run"] == 3
        ckpt = root / "run" / "checkpoint.bin"

        gt = hs.evaluate(cfg, root / "data", "ground-truth", root / "gt")
        assert gt["mean_lsd"] == 0.0
        base = hs.evaluate(cfg, root / "data", "baseline", root / "base")
        assert base["method_label"] == "SH N=2"
        zero = hs.evaluate(cfg, root / "data", "zero-kernel", root / "zero", checkpoint=ckpt)
        assert abs(zero["mean_lsd"] - base["mean_lsd"]) < 1e-9 * base["mean_lsd"]
        cnn = hs.evaluate(cfg, root / "data", "checkpoint", root / "cnn", checkpoint=ckpt)
        assert cnn["method_label"] == "spherical CNN"

        model = hs.Model.load(ckpt)
        assert model.num_params == summary["parameters"]
        field = hs.load_field(root / "data" / "fields" / "subject_001_left.hrtf")
        known = model.sparse_grid
        dense = model.dense_grid
        assert dense.hash() == field["grid"].hash()
        known_rows = [i for i, a in enumerate(dense.angles()) if a in set(known.angles())]
        sparse = [field["values"][i] for i in known_rows]
        out = model.forward(sparse)
        assert len(out) == len(dense) and len(out[0]) == 3
        assert out == model.forward(sparse)

        path = root / "sparse.hrtf"
        hs.save_field(path, sparse, known, field["frequencies"], subject=1, ear="left")
        again = hs.load_field(path)
        assert again["values"] == sparse and again["ear"] == "left"

        try:
            hs.Model.load(root / "missing.bin")
        except OSError:
            pass
        else:
            raise AssertionError("missing checkpoint was not reported")


def main():
    check_transforms()
    check_lsd_and_baseline()
    check_pipeline()
    print(f"hrtf_sphconv {hs.__version__}: smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
