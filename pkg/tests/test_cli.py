import re

import numpy as np
import pytest

from mirrornet import cli
from mirrornet import loss as loss_mod
from mirrornet.dataset import encode_pnm, load_pairs, read_pnm

ERROR_LINE = re.compile(r'^error category=(\w+) message="[^"\n]*"$')
FAST = ["--set", "optim.epochs=1", "--set", "optim.batch_size=4", "--set", "network.widths=8,16,32,64",
        "--set", "network.reduction=2", "--set", "train.bce_warmup=0"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def assert_error(capsys, category, *argv):
    code, out, err = run(capsys, *argv)
    assert code == cli.EXIT_CODES[category], err
    lines = err.strip().splitlines()
    assert len(lines) == 1 and ERROR_LINE.match(lines[0]), err
    assert ERROR_LINE.match(lines[0]).group(1) == category
    return lines[0]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny dataset plus a one-epoch checkpoint shared by the read-only commands."""
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-data", "--out", str(root / "data"), "--n", "4", "--seed", "3"]) == 0
    assert cli.main(["train", "--data", str(root / "data"), "--checkpoint", str(root / "m.ckpt"),
                     "--seed", "3", *FAST]) == 0
    return root


def test_gen_data_split_is_group_disjoint(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-data", "--out", tmp_path, "--n", 12, "--split", "--resolution", 32)
    assert code == 0 and out.startswith("wrote=12 ")
    train, test = load_pairs(tmp_path / "train"), load_pairs(tmp_path / "test")
    assert len(train) + len(test) == 12
    assert {r.group for r in train}.isdisjoint({r.group for r in test})
    assert train[0].image.shape == (32, 32, 3)


def test_train_log_records(tmp_path, workspace, capsys):
    log = tmp_path / "train.log"
    code, out, _ = run(capsys, "train", "--data", workspace / "data", "--checkpoint", tmp_path / "a.ckpt",
                       "--log", log, "--mode", "no_ccfe", *FAST)
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0].startswith("mode=no_ccfe loss=lovasz bce_warmup=0 seed=")
    assert re.match(r"^epoch=1 loss=\S+ train_iou=\S+ lr=\S+ seconds=\S+$", lines[1])
    assert lines[-1].startswith("done epochs=1 ")
    assert log.read_text().strip().splitlines() == lines


def test_training_is_deterministic(tmp_path, workspace, capsys):
    for name in ("a", "b"):
        assert run(capsys, "train", "--data", workspace / "data", "--checkpoint", tmp_path / f"{name}.ckpt",
                   "--seed", 9, *FAST)[0] == 0
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_seed_comes_from_environment(tmp_path, workspace, capsys, monkeypatch):
    monkeypatch.setenv("MIRRORNET_SEED", "21")
    _, out, _ = run(capsys, "train", "--data", workspace / "data", "--checkpoint", tmp_path / "e.ckpt", *FAST)
    assert "seed=21" in out.splitlines()[0]
    _, out, _ = run(capsys, "train", "--data", workspace / "data", "--checkpoint", tmp_path / "f.ckpt",
                    "--seed", 4, *FAST)
    assert "seed=4" in out.splitlines()[0]


def test_bce_mode_never_calls_lovasz(tmp_path, workspace, capsys):
    before = loss_mod.LOVASZ_CALLS
    assert run(capsys, "train", "--data", workspace / "data", "--checkpoint", tmp_path / "l.ckpt", *FAST)[0] == 0
    assert loss_mod.LOVASZ_CALLS > before
    before = loss_mod.LOVASZ_CALLS
    code, out, _ = run(capsys, "train", "--data", workspace / "data", "--checkpoint", tmp_path / "b.ckpt",
                       "--mode", "bce_loss", *FAST)
    assert code == 0 and "loss=bce" in out
    assert loss_mod.LOVASZ_CALLS == before


def test_eval_with_and_without_crf(workspace, capsys):
    code, out, _ = run(capsys, "eval", "--checkpoint", workspace / "m.ckpt", "--data", workspace / "data")
    assert code == 0
    keys = [line.split("=")[0] for line in out.splitlines()[:6]]
    assert keys == ["iou", "acc", "f_beta", "mae", "ber", "n_images"]
    code, crf_out, _ = run(capsys, "eval", "--checkpoint", workspace / "m.ckpt", "--data", workspace / "data",
                           "--crf")
    assert code == 0 and "n_images=4" in crf_out


def test_eval_rejects_resolution_mismatch(workspace, capsys):
    assert_error(capsys, "config", "eval", "--checkpoint", workspace / "m.ckpt", "--data", workspace / "data",
                 "--set", "network.resolution=32")


def test_infer_writes_maps_at_source_size(tmp_path, workspace, capsys):
    image = np.random.default_rng(0).integers(0, 256, (40, 24, 3)).astype(np.uint8)
    (tmp_path / "odd.ppm").write_bytes(encode_pnm(image))
    code, out, _ = run(capsys, "infer", "--checkpoint", workspace / "m.ckpt", "--out", tmp_path / "o",
                       tmp_path / "odd.ppm")
    assert code == 0 and "mirror_fraction=" in out
    prob, mask = read_pnm(tmp_path / "o" / "odd_prob.pgm"), read_pnm(tmp_path / "o" / "odd_mask.pgm")
    assert prob.shape == mask.shape == (40, 24)
    assert set(np.unique(mask)) <= {0, 255}
    np.testing.assert_array_equal(mask == 255, prob >= 128)


def test_infer_threshold_extremes(tmp_path, workspace, capsys):
    src = sorted((workspace / "data").glob("*.ppm"))[0]
    for thr, expected in ((1e-9, 255), (1 - 1e-12, 0)):
        assert run(capsys, "infer", "--checkpoint", workspace / "m.ckpt", "--out", tmp_path,
                   "--threshold", thr, src)[0] == 0
        assert np.all(read_pnm(tmp_path / f"{src.stem}_mask.pgm") == expected)


def test_stats_and_location_map(tmp_path, workspace, capsys):
    code, out, _ = run(capsys, "stats", "--data", workspace / "data", "--map-size", 16,
                       "--location-map", tmp_path / "loc.pgm")
    assert code == 0 and out.startswith("n_images=4\nchi2_skipped=0\n")
    assert read_pnm(tmp_path / "loc.pgm").shape == (16, 16)


def test_crf_command(tmp_path, capsys):
    image = np.zeros((8, 8, 3), np.uint8)
    image[:, 4:] = 255
    prob = np.full((8, 8), 90, np.uint8)
    prob[:, 4:] = 170
    prob[2, 6] = 60  # a lone wrong pixel inside the bright half
    (tmp_path / "i.ppm").write_bytes(encode_pnm(image))
    (tmp_path / "p.pgm").write_bytes(encode_pnm(prob))
    code, _, _ = run(capsys, "crf", "--image", tmp_path / "i.ppm", "--prob", tmp_path / "p.pgm",
                     "--out", tmp_path / "r")
    assert code == 0
    mask = read_pnm(tmp_path / "r_mask.pgm")
    assert np.all(mask[:, 4:] == 255) and np.all(mask[:, :4] == 0)


def test_error_categories(tmp_path, workspace, capsys):
    assert_error(capsys, "usage", "fly")
    assert_error(capsys, "usage", "train", "--mode", "huge")
    assert_error(capsys, "usage", "train", "--set", "nodot=1")
    assert_error(capsys, "config", "train", "--set", "optim.colour=red")
    bad = tmp_path / "bad.cfg"
    bad.write_text("[run]\nmode = full\nsurprise = 1\n")
    line = assert_error(capsys, "config", "stats", "--config", bad)
    assert "surprise" in line
    assert_error(capsys, "data", "stats", "--data", tmp_path / "nowhere")
    (tmp_path / "junk.ckpt").write_bytes(b"nope")
    assert_error(capsys, "checkpoint", "eval", "--checkpoint", tmp_path / "junk.ckpt")
    assert_error(capsys, "checkpoint", "eval", "--checkpoint", tmp_path / "missing.ckpt")
    truncated = tmp_path / "t.ckpt"
    truncated.write_bytes((workspace / "m.ckpt").read_bytes()[:-10])
    assert_error(capsys, "checkpoint", "eval", "--checkpoint", truncated)
    (tmp_path / "g.pgm").write_bytes(encode_pnm(np.zeros((4, 4), np.uint8)))
    assert_error(capsys, "data", "crf", "--image", tmp_path / "g.pgm", "--prob", tmp_path / "g.pgm",
                 "--out", tmp_path / "x")


def test_help_documents_every_key(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for key in ("base_lr", "ccfe_blocks", "theta_beta", "frame_width", "target_iou", "MIRRORNET_SEED"):
        assert key in out
