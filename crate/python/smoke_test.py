"""Smoke test for the cvla_py extension: world, generator, a tiny training
run, explanation and frames. Build first with

    pip install maturin && maturin develop --release -m crates/py/Cargo.toml
"""

import json
import os
import tempfile

import cvla_py

PREFIX = "The lung with the abnormalities of "


def main():
    world = cvla_py.World(image_size=16, seed=3)
    vocab = world.vocabulary()
    assert vocab[0] == "cardiomegaly" and len(vocab) == 5, vocab

    prompt = cvla_py.reorganize_prompt(["cardiomegaly", "effusion"], vocab)
    assert prompt.startswith(PREFIX), prompt
    assert cvla_py.parse_prompt(prompt, vocab) == ["cardiomegaly", "effusion"]

    phantom = world.render(["cardiomegaly"], seed=1)
    assert phantom.findings == ["cardiomegaly"]
    assert set(phantom.regions) == {"cardiomegaly"}
    image = phantom.image
    assert (image.width, image.height) == (16, 16)
    assert len(image.pixels()) == 256 and len(image.rows()) == 16

    generator = cvla_py.Generator("a", image_size=16)
    report = generator.report(image)
    assert isinstance(report, str) and report
    assert generator.prompt(image).startswith(PREFIX)
    assert len(generator.statistics(image)) == 5

    config = {
        "steps": 6,
        "checkpoint_every": 3,
        "batch_size": 2,
        "ddim_steps": 3,
        "schedule": {"t_train": 20},
        "arch": {"channels": [2, 2, 2], "emb_dim": 4, "cond_map_channels": 1},
    }
    models = cvla_py.train(world, generator, 16, val=2, test=2, config=json.dumps(config))
    assert [m.step for m in models] == [3, 6]
    best = models[cvla_py.select_checkpoint(models)]
    assert best.generator_id == "a"

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.json")
        best.save(path)
        loaded = cvla_py.Model.load(path)
        assert loaded.step == best.step
        pgm = os.path.join(tmp, "query.pgm")
        image.write_pgm(pgm)
        assert cvla_py.Image.read_pgm(pgm).width == 16

    recon = loaded.reconstruct(image, generator.findings(image), ddim_steps=3)
    assert cvla_py.psnr(recon, image) > 0.0

    record = loaded.explain(image, generator, ddim_steps=3)
    assert record["prompt"].startswith(PREFIX)
    assert len(record["edits"]) == len(generator.findings(image))
    for edit in record["edits"]:
        assert isinstance(edit["success"], bool)
        boxes = cvla_py.frames(image, edit["counterfactual"], threshold=10.0)
        assert len(boxes) <= 5

    if generator.findings(image):
        cf, edited = loaded.counterfactual(image, generator, generator.findings(image)[0], ddim_steps=3)
        assert cf.width == 16 and edited.startswith(PREFIX)

    try:
        cvla_py.Generator("nope")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown generator id accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
