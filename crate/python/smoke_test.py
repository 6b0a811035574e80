#!/usr/bin/env python3
"""Smoke test for the stadv_py extension module.

Locates the compiled extension under target/, imports it, and exercises the
main surfaces on the bundled MNIST subset: dataset loading, model building,
warping, flow metrics, and one fast attack. Runs in well under a minute.

Build the extension first:

    cargo build --release -p stadv-py --features extension-module
    python3 python/smoke_test.py
"""

import os
import shutil
import sys
import tempfile

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def locate_extension():
    names = ["libstadv_py.so", "stadv_py.so", "libstadv_py.dylib", "stadv_py.pyd"]
    for profile in ("release", "debug"):
        for name in names:
            p = os.path.join(REPO, "target", profile, name)
            if os.path.exists(p):
                return p
    sys.exit(
        "stadv_py extension not found; build it with\n"
        "  cargo build --release -p stadv-py --features extension-module"
    )


def import_extension():
    src = locate_extension()
    staging = tempfile.mkdtemp(prefix="stadv_py_")
    shutil.copy(src, os.path.join(staging, "stadv_py.so"))
    sys.path.insert(0, staging)
    import stadv_py

    return stadv_py


def main():
    stadv = import_extension()

    data_dir = os.path.join(REPO, "data", "mnist")
    ds = stadv.load_mnist(data_dir, "test")
    assert len(ds) == 1000, f"expected the bundled 1000-image test split, got {len(ds)}"
    h, w, c = ds.geometry
    pixels, label = ds.get(0)
    assert len(pixels) == h * w * c
    assert all(0.0 <= p <= 1.0 for p in pixels)
    print(f"dataset ok: {len(ds)} images, geometry {h}x{w}x{c}, first label {label}")

    model = stadv.Model("A", seed=7)
    assert model.input_geometry == (28, 28, 1)
    logits = model.logits(h, w, c, pixels)
    assert len(logits) == 10
    pred = model.predict(h, w, c, pixels)
    assert pred == max(range(10), key=lambda i: logits[i])
    print(f"model ok: {model.name} with {model.num_params} params, argmax {pred}")

    # zero flow must reproduce the image bit for bit
    zero = [0.0] * (h * w)
    warped = stadv.bilinear_warp(h, w, c, pixels, zero, zero)
    assert warped == pixels
    tv, l2 = stadv.flow_metrics(h, w, zero, zero)
    assert tv == 0.0 and l2 == 0.0
    # constant flow (1, 0) has unit l2 magnitude and zero tv
    tv, l2 = stadv.flow_metrics(h, w, [1.0] * (h * w), zero)
    assert tv == 0.0 and abs(l2 - 1.0) < 1e-12
    print("warp and flow metrics ok")

    blurred = stadv.mean_blur(h, w, c, pixels)
    assert len(blurred) == len(pixels)
    print("mean blur ok")

    # fgsm against the untrained model: fast, and the budget must hold exactly
    out = stadv.fgsm_attack(model, pixels, label, 0.25)
    delta = max(abs(a - b) for a, b in zip(out["adversarial"], pixels))
    assert delta <= 0.25 + 1e-12
    print(f"fgsm ok: success={out['success']}, linf delta {delta:.3f}")

    # a short flow attack against the untrained model exercises the solver path
    out = stadv.stadv_attack(model, pixels, label, tau=0.05, max_iters=20)
    assert "flow_du" in out and len(out["flow_du"]) == h * w
    assert out["flow_tv"] >= 0.0 and out["flow_l2"] >= 0.0
    print(
        f"stadv ok: success={out['success']}, "
        f"flow tv {out['flow_tv']:.4f}, flow l2 {out['flow_l2']:.4f}, "
        f"{len(out['objective_trace'])} trace points"
    )

    print("smoke test passed")


if __name__ == "__main__":
    main()
