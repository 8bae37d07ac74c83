"""Smoke test for the `runet` extension module.

Build and install first, e.g.

    pip install --no-build-isolation ./crates/python

then run `python python/smoke_test.py`.
"""

import math
import os
import tempfile

import runet


def check_weights():
    w = runet.iteration_weights(3, 0.4)
    assert len(w) == 3
    assert all(math.isclose(a, b) for a, b in zip(w, [0.16, 0.4, 1.0]))
    try:
        runet.iteration_weights(3, 0.0)
    except ValueError as e:
        assert "alpha" in str(e)
    else:
        raise AssertionError("alpha = 0 was accepted")


def check_metrics():
    prob = [0.9, 0.8, 0.2, 0.1, 0.7, 0.3]
    gt = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0]
    m = runet.compute_metrics(prob, gt)
    assert (m["tp"], m["fp"], m["fn"], m["tn"]) == (2, 1, 1, 2)
    assert math.isclose(m["fg_iou"], 0.5)
    assert math.isclose(m["miou"], 0.5)


def check_model():
    model = runet.Model("dru", level=4, iterations=3, seed=1)
    assert model.parameter_count == 368817, model.parameter_count
    image, mask = runet.synth_sample("curves", 0, height=64, width=64)
    assert len(image) == 3 * 64 * 64 and len(mask) == 64 * 64
    steps = model.predict(image, (3, 64, 64))
    assert len(steps) == 3
    assert all(len(s) == 64 * 64 and all(0.0 <= p <= 1.0 for p in s) for s in steps)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.ckpt")
        model.save(path)
        again = runet.Model.load(path)
        assert again.predict(image, (3, 64, 64), iterations=3) == steps

    curve = runet.Model("unet").fit_synthetic("blobs", train_count=8, val_count=4, size=32, epochs=1)
    assert len(curve) == 1 and 0.0 <= curve[0] <= 1.0
    print(model)


if __name__ == "__main__":
    check_weights()
    check_metrics()
    check_model()
    print("smoke test passed")
