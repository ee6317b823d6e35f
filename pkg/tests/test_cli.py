"""Command-line behaviour: config handling, artifacts, exit codes, determinism."""
import hashlib
import json
from dataclasses import fields
from pathlib import Path

import numpy as np
import pytest

from mcae import cli
from mcae.data import write_idx
from mcae.diagnostics import tiny_config
from mcae.masking import sample_mask
from mcae.numerics import ops
from mcae.numerics.tensor import OpKind
from mcae.pipeline import MCAEModel, image_rng
from mcae.training import evaluate, load_model

TINY = """\
# small enough to train in a couple of seconds
num_caps=4
caps_dim=4
encoder_layers=1
backbone_depth=1
epochs=2
batch_size=16
seed=3
"""


def _fake_mnist(root: Path, n_train=120, n_test=40, seed=0) -> Path:
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    for split, n in (("train", n_train), ("t10k", n_test)):
        labels = (np.arange(n) % 10).astype(np.uint8)
        imgs = np.zeros((n, 28, 28), np.uint8)
        for i, y in enumerate(labels):
            # a class-dependent bar plus noise, so the task is learnable but not trivial
            imgs[i, 2 + 2 * y:5 + 2 * y, 4:24] = 200
            imgs[i] = np.maximum(imgs[i], rng.integers(0, 40, (28, 28)).astype(np.uint8))
        write_idx(root / f"{split}-images-idx3-ubyte", imgs)
        write_idx(root / f"{split}-labels-idx1-ubyte", labels)
    return root


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = _fake_mnist(root / "data")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY + f"data_dir={data}\n", encoding="utf-8")
    return root, cfg, data


@pytest.fixture(scope="module")
def trained(workspace):
    root, cfg, _ = workspace
    assert cli.main(["pretrain", "--config", str(cfg), "--out", str(root / "pt")]) == 0
    assert cli.main(["finetune", "--config", str(cfg), "--init", str(root / "pt" / cli.CHECKPOINT_NAME),
                     "--out", str(root / "ft")]) == 0
    return root / "pt" / cli.CHECKPOINT_NAME, root / "ft" / cli.CHECKPOINT_NAME


@pytest.fixture(autouse=True)
def _no_env_override(monkeypatch):
    monkeypatch.delenv("MCAE_DATA_DIR", raising=False)


# ---- config ---------------------------------------------------------------

def test_help_lists_every_key_with_default(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["--help"])
    assert e.value.code == 0
    out = capsys.readouterr().out
    for f in fields(cli.RunConfig):
        assert f"{f.name}={f.default}" in out


def test_spec_keys_present():
    names = {f.name for f in fields(cli.RunConfig)}
    for key in ("dataset", "data_dir", "backbone", "patch_size", "num_caps", "caps_dim", "encoder_layers",
                "mask_ratio", "reconstruction_target", "epochs", "lr_init", "momentum", "batch_size", "seed",
                "out_dir", "mask_token_sigma", "mask_token_activation", "augment_policy"):
        assert key in names


def test_defaults():
    c = cli.parse_config("")
    assert (c.mask_ratio, c.lr_init, c.encoder_layers, c.num_caps, c.epochs) == (0.5, 0.1, 3, 16, 0)
    assert cli.train_config(c, "pretrain").epochs == 50
    assert cli.train_config(c, "finetune").epochs == 350


def test_parse_types_and_comments():
    c = cli.parse_config("num_caps = 8  # K\n\nlr_init=0.05\nbackbone=vit\n")
    assert c.num_caps == 8 and isinstance(c.num_caps, int)
    assert c.lr_init == 0.05 and c.backbone == "vit"


@pytest.mark.parametrize("text, fragment", [
    ("bogus=1\n", "unknown config key 'bogus'"),
    ("num_caps=eight\n", "num_caps needs a int"),
    ("just words\n", "expected key=value"),
    ("dataset=cifar\n", "dataset must be one of"),
])
def test_bad_config_exits_1(tmp_path, capsys, text, fragment):
    p = tmp_path / "bad.cfg"
    p.write_text(text)
    assert cli.main(["pretrain", "--config", str(p), "--out", str(tmp_path / "o")]) == 1
    assert fragment in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "nowhere.cfg"
    assert cli.main(["pretrain", "--config", str(missing), "--out", str(tmp_path / "o")]) == 1
    assert str(missing) in capsys.readouterr().err


def test_usage_errors_exit_1(capsys):
    assert cli.main([]) == 1
    assert cli.main(["pretrain"]) == 1
    assert cli.main(["teleport"]) == 1


def test_invalid_model_value_exits_1(tmp_path, workspace):
    _, cfg, _ = workspace
    p = tmp_path / "c.cfg"
    p.write_text(cfg.read_text() + "patch_size=5\n")
    assert cli.main(["pretrain", "--config", str(p), "--out", str(tmp_path / "o")]) == 1


def test_env_overrides_data_dir(monkeypatch, tmp_path, workspace, capsys):
    _, cfg, data = workspace
    monkeypatch.setenv("MCAE_DATA_DIR", str(tmp_path / "empty"))
    assert cli.read_config(str(cfg)).data_dir == str(tmp_path / "empty")
    assert cli.main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert str(tmp_path / "empty") in capsys.readouterr().err
    monkeypatch.setenv("MCAE_DATA_DIR", str(data))
    assert cli.read_config(None).data_dir == str(data)


def test_corrupt_data_exits_2(tmp_path, workspace):
    _, cfg, data = workspace
    bad = tmp_path / "data"
    bad.mkdir()
    for f in data.iterdir():
        (bad / f.name).write_bytes(f.read_bytes()[:-7])
    p = tmp_path / "c.cfg"
    p.write_text(cfg.read_text() + f"data_dir={bad}\n")
    assert cli.main(["pretrain", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


# ---- pretrain / finetune ---------------------------------------------------

def test_out_dir_holds_exactly_two_files(trained):
    pt, ft = trained
    for ckpt in (pt, ft):
        assert sorted(p.name for p in ckpt.parent.iterdir()) == sorted([cli.CHECKPOINT_NAME, cli.METRICS_NAME])


def test_metrics_csv_has_val_top1(trained):
    _, ft = trained
    lines = (ft.parent / cli.METRICS_NAME).read_text().splitlines()
    assert lines[0].split(",") == ["epoch", "lr", "train_loss", "val_loss", "val_top1"]
    assert len(lines) == 3
    for row in lines[1:]:
        top1 = float(row.split(",")[4])
        assert 0.0 <= top1 <= 1.0


def test_pretrain_metrics_leave_top1_blank(trained):
    pt, _ = trained
    rows = (pt.parent / cli.METRICS_NAME).read_text().splitlines()[1:]
    assert all(r.endswith(",") for r in rows)


def test_verbose_logs_mask_counts(tmp_path, workspace, capsys):
    _, cfg, _ = workspace
    p = tmp_path / "c.cfg"
    p.write_text(cfg.read_text().replace("epochs=2", "epochs=1"))
    assert cli.main(["pretrain", "--config", str(p), "--out", str(tmp_path / "o"), "--verbose"]) == 0
    lines = [ln for ln in capsys.readouterr().out.splitlines() if "masked=" in ln]
    assert lines and all(ln.endswith("masked=8/16") for ln in lines)


def test_both_arms_from_one_config(tmp_path, workspace, trained):
    _, cfg, _ = workspace
    pt, _ = trained
    assert cli.main(["finetune", "--config", str(cfg), "--init", "none", "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["finetune", "--config", str(cfg), "--init", str(pt), "--out", str(tmp_path / "b")]) == 0
    a = load_model(tmp_path / "a" / cli.CHECKPOINT_NAME)
    b = load_model(tmp_path / "b" / cli.CHECKPOINT_NAME)
    assert a.phase == b.phase == "finetune"
    wa = a.named_parameters()["primary.W_act"].data
    wb = b.named_parameters()["primary.W_act"].data
    assert not np.array_equal(wa, wb)


def test_incompatible_init_names_tensor(tmp_path, workspace, trained, capsys):
    _, cfg, _ = workspace
    pt, _ = trained
    p = tmp_path / "k.cfg"
    p.write_text(cfg.read_text() + "caps_dim=2\n")
    assert cli.main(["finetune", "--config", str(p), "--init", str(pt), "--out", str(tmp_path / "o")]) == 2
    assert "backbone.patch_embed.weight" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_missing_init_checkpoint_exits_2(tmp_path, workspace):
    _, cfg, _ = workspace
    rc = cli.main(["finetune", "--config", str(cfg), "--init", str(tmp_path / "none.mcae"),
                   "--out", str(tmp_path / "o")])
    assert rc == 2


def test_pretrain_is_deterministic(tmp_path, workspace, trained):
    _, cfg, _ = workspace
    pt, _ = trained
    assert cli.main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    for name in (cli.CHECKPOINT_NAME, cli.METRICS_NAME):
        assert _digest(tmp_path / "again" / name) == _digest(pt.parent / name)


def test_inputs_untouched(tmp_path, workspace, trained):
    _, cfg, data = workspace
    pt, ft = trained
    watched = [cfg, pt, ft, *sorted(data.iterdir())]
    before = [_digest(p) for p in watched]
    cli.main(["eval", "--config", str(cfg), "--checkpoint", str(ft)])
    cli.main(["reconstruct", "--config", str(cfg), "--checkpoint", str(pt), "--n", "1",
              "--out-dir", str(tmp_path / "r")])
    assert [_digest(p) for p in watched] == before


# ---- eval ------------------------------------------------------------------

def test_eval_prints_json_matching_evaluate(workspace, trained, capsys):
    _, cfg, _ = workspace
    _, ft = trained
    assert cli.main(["eval", "--config", str(cfg), "--checkpoint", str(ft)]) == 0
    first = capsys.readouterr().out
    assert cli.main(["eval", "--config", str(cfg), "--checkpoint", str(ft)]) == 0
    assert capsys.readouterr().out == first
    lines = first.splitlines()
    assert lines[0].startswith("test top-1")
    result = json.loads(lines[-1])
    ref = evaluate(load_model(ft, "finetune"), cli.load_splits(cli.read_config(str(cfg)))["test"])
    assert result["top1"] == ref["top1"] and result["loss"] == ref["loss"]


def test_eval_wrong_phase(workspace, trained, capsys):
    _, cfg, _ = workspace
    pt, _ = trained
    assert cli.main(["eval", "--config", str(cfg), "--checkpoint", str(pt)]) == 2
    assert "pretrain checkpoint" in capsys.readouterr().err


def test_eval_truncated_checkpoint(tmp_path, workspace, trained):
    _, cfg, _ = workspace
    _, ft = trained
    bad = tmp_path / "bad.mcae"
    bad.write_bytes(ft.read_bytes()[:100])
    assert cli.main(["eval", "--config", str(cfg), "--checkpoint", str(bad)]) == 2


# ---- reconstruct -----------------------------------------------------------

def _read_pgm(path: Path) -> tuple[bytes, np.ndarray]:
    raw = path.read_bytes()
    header, body = raw.split(b"\n", 1)
    w, h = int(header.split()[1]), int(header.split()[2])
    return header, np.frombuffer(body, np.uint8).reshape(h, w)


def test_reconstruct_writes_triplets(tmp_path, workspace, trained):
    _, cfg, _ = workspace
    pt, _ = trained
    out = tmp_path / "rec"
    assert cli.main(["reconstruct", "--config", str(cfg), "--checkpoint", str(pt), "--n", "3",
                     "--out-dir", str(out)]) == 0
    files = sorted(out.iterdir())
    assert len(files) == 9
    for f in files:
        header, img = _read_pgm(f)
        assert header == b"P5 28 28 255"
        assert f.stat().st_size == len(header) + 1 + 28 * 28


def test_reconstruct_visible_regions_exact(tmp_path, workspace, trained):
    _, cfg, _ = workspace
    pt, _ = trained
    out = tmp_path / "rec"
    cli.main(["reconstruct", "--config", str(cfg), "--checkpoint", str(pt), "--n", "2", "--out-dir", str(out)])
    rc = cli.read_config(str(cfg))
    test = cli.load_splits(rc)["test"]
    for i in range(2):
        _, original = _read_pgm(out / f"sample{i:03d}_original.pgm")
        _, recon = _read_pgm(out / f"sample{i:03d}_recon.pgm")
        _, masked = _read_pgm(out / f"sample{i:03d}_masked.pgm")
        assert np.array_equal(original, cli.quantize(test.images[i, 0]))
        plan = sample_mask(16, rc.mask_ratio, image_rng(rc.seed, 0, i))
        vis = np.repeat(np.repeat(plan.visibility().reshape(4, 4), 7, 0), 7, 1).astype(bool)
        assert np.array_equal(recon[vis], original[vis])
        assert np.array_equal(masked[vis], original[vis])
        assert not masked[~vis].any()


def test_reconstruct_rejects_finetune_checkpoint(tmp_path, workspace, trained, capsys):
    _, cfg, _ = workspace
    _, ft = trained
    rc = cli.main(["reconstruct", "--config", str(cfg), "--checkpoint", str(ft), "--n", "1",
                   "--out-dir", str(tmp_path / "r")])
    assert rc == 2
    assert "finetune checkpoint" in capsys.readouterr().err


def test_write_pgm_quantizes(tmp_path):
    img = np.array([[0.0, 0.5], [1.0, 2.0]])
    cli.write_pgm(tmp_path / "x.pgm", img)
    assert (tmp_path / "x.pgm").read_bytes() == b"P5 2 2 255\n" + bytes([0, 128, 255, 255])


# ---- gradcheck -------------------------------------------------------------

def test_gradcheck_passes_and_lists_every_tensor(capsys):
    assert cli.main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    for backbone in ("convmixer", "vit"):
        for name in MCAEModel.build(tiny_config(backbone), "pretrain").named_parameters():
            assert name in out
    for name in MCAEModel.build(tiny_config(), "finetune").named_parameters():
        if name.startswith("class_head."):
            assert name in out
    for layer in ("patch_embed", "convmixer_block", "vit_block", "primary_projection", "self_route_local",
                  "decoder_forward", "pixel_projection", "class_head", "mse_loss", "ce_loss"):
        assert f"{layer} " in out or f"{layer}[" in out
    assert "FAIL" not in out


@pytest.fixture
def corrupted_gelu(monkeypatch):
    """Scale the GELU backward rule by 1.1; the audit must notice."""
    real = ops._record

    def record(kind, inputs, out, vjp, **attrs):
        if kind == OpKind.GELU:
            inner = vjp
            vjp = lambda g: tuple(1.1 * v for v in inner(g))  # noqa: E731
        return real(kind, inputs, out, vjp, **attrs)

    monkeypatch.setattr(ops, "_record", record)


def test_gradcheck_detects_corrupted_backward(corrupted_gelu, capsys):
    assert cli.main(["gradcheck"]) == 3
    out = capsys.readouterr().out
    assert "FAIL" in out
