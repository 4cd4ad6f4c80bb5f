"""Quick end-to-end check of the pyubpa extension module.

Build and install first:

    pip install maturin
    pip install --no-build-isolation ./crates/python
"""

import json
import math
import tempfile

import pyubpa


def check_evidence():
    b = pyubpa.bpa([[8, 2], [1, 9]])
    assert not b.degenerate
    assert abs(b.masses[0] - 704 / 1433) < 1e-12
    assert abs(b.masses[1] - 729 / 1433) < 1e-12
    assert abs(b.gamma - math.hypot(704, 729) / 1433) < 1e-12
    assert abs(pyubpa.gamma(b.masses) - b.gamma) < 1e-15

    d = pyubpa.bpa([[0, 1, 0], [0, 0, 1], [1, 0, 0]])
    assert d.degenerate
    assert all(abs(m - 1 / 3) < 1e-15 for m in d.masses)

    cm = pyubpa.confusion_matrix([0, 1, 1, 2], [0, 1, 2, 2], 3)
    assert cm == [[1, 0, 0], [0, 1, 0], [0, 1, 1]], cm

    try:
        pyubpa.bpa([[1, 2]])
    except ValueError:
        pass
    else:
        raise AssertionError("non-square confusion matrix accepted")


def check_heads():
    loss, grad = pyubpa.softmax_loss([1.0, 2.0, 0.5], 1)
    z = sum(math.exp(v) for v in (1.0, 2.0, 0.5))
    assert abs(loss - (math.log(z) - 2.0)) < 1e-12
    assert abs(sum(grad)) < 1e-12
    for head, tol in (("softmax", 1e-6), ("svm", 1e-6), ("lda", 1e-4)):
        err = pyubpa.gradcheck(head, seed=3)
        assert err <= tol, (head, err)


def check_training():
    tx, ty, vx, vy = pyubpa.synth_blobs(0, classes=3, per_class=100)
    assert len(tx) + len(vx) == 300 and len(tx) == len(ty)

    config = {
        "dataset": {"blobs": {"classes": 3, "per_class": 300, "dim": 2, "separation": 14.0}},
        "objectives": ["softmax", "svm"],
        "architecture": [
            {"type": "dense", "in": 2, "out": 16},
            {"type": "relu"},
            {"type": "dense", "in": 16, "out": 3},
        ],
        "eta": 0.01,
        "epochs": 5,
        "batch_size": 32,
        "seed": 0,
    }
    with tempfile.TemporaryDirectory() as out:
        model = pyubpa.Model.fit(json.dumps(config), out_dir=out)
        assert model.epoch == 5
        assert model.objectives == ["softmax", "svm"]
        for g in model.gammas():
            assert 1 / math.sqrt(3) - 1e-12 <= g <= 1 + 1e-12
        assert model.metrics_csv().startswith("epoch,")

        path = f"{out}/model.ubpa"
        model.save(path)
        again = pyubpa.Model.load(path)
        assert again.gammas() == model.gammas()
        errors = dict(again.test_error())
        assert errors == dict(model.test_error())
        assert errors["combined"] < 20.0, errors
        assert model.predict(vx[0]) in (0, 1, 2)


if __name__ == "__main__":
    check_evidence()
    check_heads()
    check_training()
    print("pyubpa smoke test: ok")
