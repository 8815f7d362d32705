"""Exercise the psx extension module end to end."""

import json
import math
import sys
import tempfile
from pathlib import Path

import psx


def main() -> int:
    img = psx.Image.synthetic(48, seed=3)
    assert (img.height, img.width, img.channels) == (48, 48, 3)

    assert abs(psx.kernel_weight(0.5) - math.exp(-4)) < 1e-12
    assert psx.cosine_distance([True] * 4, [True, False, False, False]) == 0.5
    assert psx.msssim_distance(img, img) == 0.0
    assert psx.nlpd_distance(img, img) == 0.0
    noisy = img.distort("gaussian_noise:3", seed=1)
    assert 0.0 < psx.msssim_distance(img, noisy) < 1.0

    probs = psx.toy_predict(img)
    assert abs(sum(probs) - 1.0) < 1e-9
    top = psx.top_k(probs, 2)

    seg = psx.slic(img)
    assert seg.segment_count > 1
    assert len(seg.labels()) == 48 * 48

    cos, nlpd = psx.explain(img, seg, distance="cosine,nlpd", samples=200, seed=5)
    assert cos.class_ids == top and cos.distance == "cosine" and nlpd.distance == "nlpd"
    assert len(cos.coefficients(top[0])) == seg.segment_count
    again = psx.Explanation.from_json(cos.to_json())
    assert psx.explanation_distance(cos, again) == 0.0
    assert psx.explanation_distance(cos, nlpd) >= 0.0

    try:
        cos.coefficients(999)
    except KeyError:
        pass
    else:
        raise AssertionError("unknown class accepted")
    try:
        psx.explain(img, distance="euclid")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown distance accepted")

    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp)
        cos.overlay(img, top[0]).save(str(out / "overlay.png"))
        assert psx.Image.load(str(out / "overlay.png")).width == 48
        summary = psx.run_bench("synthetic:2:32", str(out / "bench"), severities=[1], samples=60)
        scopes = {(row[0], row[1]) for row in summary}
        assert ("all", "msssim") in scopes
        header = (out / "bench" / "results.csv").read_text().splitlines()[0]
        assert header.startswith("image_id,family,severity")
        json.loads((out / "bench" / "run-config.json").read_text())

    print("psx smoke test passed:", psx.__version__)
    return 0


if __name__ == "__main__":
    sys.exit(main())
