import numpy as np
import pytest

from gradleak import (
    SeedRng,
    Tensor,
    build_model,
    default_attack_spec,
    one_hot,
    read_bundle,
    read_image,
    serialize_bundle,
    synth_image,
    victim_gradient,
    write_bundle,
    write_image,
)
from gradleak.cli import cli_main


def _write_model(path, h=12, w=12, c=1, m=2):
    spec = default_attack_spec(h, w, c, m)
    path.write_text(spec.canonical_text(), encoding="utf-8")
    return spec


def _tree_bytes(root):
    return {
        p.relative_to(root).as_posix(): p.read_bytes()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


@pytest.fixture()
def workspace(tmp_path):
    model = tmp_path / "model.txt"
    _write_model(model)
    image = tmp_path / "truth.pgm"
    write_image(image, synth_image("blocks", 12, 12, 1, 3))
    return tmp_path, model, image


def test_victim_grad_writes_bundle(workspace, capsys):
    tmp, model, image = workspace
    out = tmp / "g.glkb"
    code = cli_main(["victim-grad", "--model", str(model), "--image", str(image),
                     "--label", "1", "--seed", "5", "--out", str(out)])
    assert code == 0
    bundle = read_bundle(out)
    spec = default_attack_spec(12, 12, 1, 2)
    params = build_model(spec, SeedRng(5))
    expected = victim_gradient(params, read_image(image).to_tensor(), one_hot(1, 2))
    assert serialize_bundle(bundle) == serialize_bundle(expected)


def test_victim_grad_accepts_synth_descriptor(tmp_path):
    model = tmp_path / "model.txt"
    _write_model(model)
    out = tmp_path / "g.glkb"
    code = cli_main(["victim-grad", "--model", str(model),
                     "--image", "synth:blocks:12x12x1:3",
                     "--label", "0", "--seed", "5", "--out", str(out)])
    assert code == 0
    assert out.exists()


def test_attack_end_to_end(workspace, capsys):
    tmp, model, image = workspace
    grad_path = tmp / "g.glkb"
    assert cli_main(["victim-grad", "--model", str(model), "--image", str(image),
                     "--label", "0", "--seed", "5", "--out", str(grad_path)]) == 0
    out_dir = tmp / "attack"
    code = cli_main(["attack", "--model", str(model), "--grad", str(grad_path),
                     "--model-seed", "5", "--seed", "42", "--eta", "1.0",
                     "--iters", "30", "--optimizer", "gauss-newton",
                     "--truth", str(image), "--checkpoints", "10,20,30",
                     "--out", str(out_dir)])
    assert code == 0
    assert (out_dir / "recovered.pgm").exists()
    assert (out_dir / "trace.tsv").exists()
    assert (out_dir / "report.txt").exists()
    for k in (10, 20, 30):
        assert (out_dir / f"iter_{k}.pgm").exists()
    header = (out_dir / "trace.tsv").read_text().splitlines()[0]
    assert header == "iteration\tdistance\tmse_255\tmse_raw\tstep_events"
    assert "converged: true" in (out_dir / "report.txt").read_text()
    # the recovered image is pixel-exact here, so it round-trips to the truth
    assert (out_dir / "recovered.pgm").read_bytes() == image.read_bytes()


def test_attack_multi_seed_with_jobs_matches_sequential(workspace):
    tmp, model, image = workspace
    grad_path = tmp / "g.glkb"
    cli_main(["victim-grad", "--model", str(model), "--image", str(image),
              "--label", "0", "--seed", "5", "--out", str(grad_path)])
    seq_dir, par_dir = tmp / "seq", tmp / "par"
    base = ["attack", "--model", str(model), "--grad", str(grad_path),
            "--model-seed", "5", "--seed", "1,2", "--eta", "100.0",
            "--iters", "10", "--checkpoints", "5,10"]
    assert cli_main(base + ["--out", str(seq_dir)]) == 0
    assert cli_main(base + ["--jobs", "2", "--out", str(par_dir)]) == 0
    assert _tree_bytes(seq_dir) == _tree_bytes(par_dir)
    assert (seq_dir / "seed_1" / "trace.tsv").exists()
    assert (seq_dir / "seed_2" / "trace.tsv").exists()


def test_attack_digest_mismatch_exits_2(workspace, capsys):
    tmp, model, image = workspace
    other_model = tmp / "other.txt"
    _write_model(other_model, m=3)
    grad_path = tmp / "g.glkb"
    cli_main(["victim-grad", "--model", str(other_model), "--image", str(image),
              "--label", "0", "--seed", "5", "--out", str(grad_path)])
    code = cli_main(["attack", "--model", str(model), "--grad", str(grad_path),
                     "--model-seed", "5", "--seed", "1", "--iters", "5",
                     "--checkpoints", "5", "--out", str(tmp / "x")])
    assert code == 2
    assert "digest" in capsys.readouterr().err


def test_analytic_fc_and_infer_label(workspace, capsys):
    tmp, model, image = workspace
    grad_path = tmp / "g.glkb"
    cli_main(["victim-grad", "--model", str(model), "--image", str(image),
              "--label", "1", "--seed", "5", "--out", str(grad_path)])
    out = tmp / "x.tsv"
    assert cli_main(["analytic-fc", "--grad", str(grad_path), "--layer", "fc1",
                     "--out", str(out)]) == 0
    values = [float(line) for line in out.read_text().splitlines()]
    assert len(values) == 3 * 3 * 12  # flattened features feeding the dense layer

    capsys.readouterr()
    assert cli_main(["infer-label", "--grad", str(grad_path)]) == 0
    assert capsys.readouterr().out.strip() == "1"
    assert cli_main(["infer-label", "--grad", str(grad_path),
                     "--model", str(model)]) == 0
    assert capsys.readouterr().out.strip() == "1"


def test_eval_identical_prints_zero(workspace, capsys):
    tmp, model, image = workspace
    assert cli_main(["eval", "--truth", str(image), "--candidate", str(image)]) == 0
    assert capsys.readouterr().out.strip() == "0"


def test_eval_differing_images(workspace, capsys):
    tmp, model, image = workspace
    other = tmp / "other.pgm"
    write_image(other, synth_image("blocks", 12, 12, 1, 4))
    assert cli_main(["eval", "--truth", str(image), "--candidate", str(other)]) == 0
    assert float(capsys.readouterr().out.strip()) > 0


def test_usage_error_exits_1(capsys):
    assert cli_main(["attack", "--model", "x"]) == 1
    assert cli_main(["no-such-command"]) == 1
    assert cli_main([]) == 1


def test_missing_file_exits_1(tmp_path, capsys):
    assert cli_main(["eval", "--truth", str(tmp_path / "nope.pgm"),
                     "--candidate", str(tmp_path / "nope.pgm")]) == 1


def test_corrupt_inputs_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.glkb"
    bad.write_bytes(b"NOPE")
    assert cli_main(["infer-label", "--grad", str(bad)]) == 2

    bad_img = tmp_path / "bad.pgm"
    bad_img.write_bytes(b"P5\n2 2\n255\n\x00")
    assert cli_main(["eval", "--truth", str(bad_img), "--candidate", str(bad_img)]) == 2

    bad_model = tmp_path / "bad.txt"
    bad_model.write_text("wibble\n")
    assert cli_main(["victim-grad", "--model", str(bad_model),
                     "--image", "synth:blocks:12x12x1:1", "--label", "0",
                     "--seed", "1", "--out", str(tmp_path / "g.glkb")]) == 2


def test_demo_runs_and_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli_main(["demo", "--seed", "7", "--out", str(a)]) == 0
    out = capsys.readouterr().out
    assert "final mse_255" in out
    assert float(out.split("final mse_255:")[1].strip()) <= 5.0
    assert cli_main(["demo", "--seed", "7", "--out", str(b)]) == 0
    assert _tree_bytes(a) == _tree_bytes(b)
    for name in ("truth.pgm", "model.txt", "grad.glkb", "recovered.pgm",
                 "trace.tsv", "report.txt"):
        assert (a / name).exists()
