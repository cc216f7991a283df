"""Smoke test for the Python bindings.

Build the extension first:

    cargo build --release -p cspc-py
    cp target/release/libcspc.so python/cspc.so

then run `python3 python/smoke_test.py` from the repository root.
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import cspc  # noqa: E402


def main():
    assert cspc.frame_count(16000) == 77
    assert cspc.frame_count(10) is None

    wave = [math.sin(2 * math.pi * 440 * t / 16000) for t in range(16000)]
    mel = cspc.compute_mel(wave)
    assert len(mel) == 77 and len(mel[0]) == 80

    s = [[1.0] + [0.0] * 255]
    e = [[0.0, 1.0] + [0.0] * 254]
    assert cspc.orthogonality_loss(s, e) == 0.0
    assert cspc.orthogonality_loss(s, s) == 1.0

    labels = [i % 4 for i in range(80)]
    rows = [[1.0 if j == l else 0.0 for j in range(8)] + [i * 1e-3] for i, l in enumerate(labels)]
    acc, chance, n_eval = cspc.train_probe(rows, labels, 4)
    assert acc == 1.0 and chance == 0.25 and n_eval > 0

    assert cspc.sign_test([True] * 20, 0.5) < 1e-5

    with tempfile.TemporaryDirectory() as tmp:
        manifest = cspc.generate_corpus(tmp, items_per_cell=1)
        assert os.path.exists(manifest)
        ckpt = os.environ.get("CSPC_CHECKPOINT")
        if ckpt:
            model = cspc.Model.load(ckpt)
            frames = model.synthesize(
                "p01 p02 p03", os.path.join(tmp, "mels", "s0_e1_0000.mel"), 1, max_frames=20
            )
            assert 0 < len(frames) <= 20
            try:
                model.synthesize("p01", os.path.join(tmp, "mels", "s0_e1_0000.mel"), 99)
            except ValueError as err:
                assert str(err).startswith("unknown speaker")
            else:
                raise AssertionError("unknown speaker accepted")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
