"""Smoke test for the `slayr` extension module."""

import os
import tempfile

import slayr


def main():
    scenes = slayr.synth("room", 40, seed=1)
    assert len(scenes) == 40 and scenes[0]["prompt"] == "room"

    table = slayr.synthetic_table(["room"], dim=16, rank=6)
    assert "bed" in table.labels

    ckpt = slayr.train(scenes, table, d=4, j=8, epochs=2, width=16, blocks=1, heads=2,
                       optimizer="adam", lr=1e-3)
    first = ckpt.generate("room", n=3, seed=5, steps=20)
    assert first == ckpt.generate("room", n=3, seed=5, steps=20)
    assert [s["seed"] for s in first] == [5, 6, 7]

    pinned = ckpt.generate_conditioned(
        {"prompt": "room", "tokens": [{"index": 0, "label": "lamp", "box": [0.1, 0.2, 0.3, 0.4]}], "T": 10}
    )
    assert any(o["label"] == "lamp" for o in pinned["objects"])

    assert ckpt.decode(ckpt.embed("chair"), k=1)[0][0] == "chair"

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.ckpt")
        ckpt.save(path)
        loaded = slayr.Checkpoint.load(path)
        copied = slayr.Checkpoint.from_bytes(ckpt.to_bytes())
        assert loaded.generate("room", n=2, steps=8) == copied.generate("room", n=2, steps=8)

    report = slayr.evaluate(first, scenes)
    assert 0.0 <= report["miou"] <= 1.0
    print("ok", {k: report[k] for k in ("o_num", "miou")})


if __name__ == "__main__":
    main()
