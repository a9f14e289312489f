import struct

import numpy as np
import pytest

from reparamquant import checkpoint, cli, quant
from reparamquant.config import (
    PRESETS,
    ConfigError,
    format_document,
    get_preset,
    load_document,
    parse_document,
)
from reparamquant.diagnostics import outlier_report
from reparamquant.pipeline import evaluate, parse_report_text, quantize_cluster, with_act_quant
from reparamquant.repvgg import DeployedNet, NetConfig, RepVggNet, convert_to_vgg, deployed_forward, net_forward
from reparamquant.tensor import Tensor, no_grad

from test_repvgg import random_net

TINY_DOC = """\
# small end-to-end run
preset = desk-synthetic-oabn
depths = 1,1
widths = 4,4
strides = 1,2
num_classes = 4
synth_classes = 4
synth_samples = 200
synth_image_size = 8
batch_size = 32
epochs_oabn = 2
oabn_warmup = 1
lr_t_max = 2
epochs_cluster = 1
weight_bits = 4
act_bits = 8
"""


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def test_encode_decode_round_trip():
    rng = np.random.default_rng(0)
    tensors = {
        "a": rng.normal(size=(2, 3, 3, 3)).astype(np.float32),
        "codes": rng.integers(-128, 128, size=(4, 5)).astype(np.int32),
        "scalar": np.float32(2.5).reshape(()),
        "nan": np.array([np.nan, -0.0, np.inf], dtype=np.float32),
    }
    meta, back = checkpoint.decode(checkpoint.encode({"x": 1}, tensors))
    assert meta == {"x": 1}
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype and back[k].shape == tensors[k].shape
        assert back[k].tobytes() == tensors[k].tobytes()


def test_header_layout():
    raw = checkpoint.encode({}, {"w": np.ones(2, np.float32)})
    assert raw[:4] == b"RPQW"
    version, n = struct.unpack_from("<HI", raw, 4)
    assert version == 1 and raw[10 : 10 + n] == b"{}"
    name_len, code, rank = struct.unpack_from("<HBB", raw, 10 + n)
    assert (name_len, code, rank) == (1, 0, 1)


@pytest.mark.parametrize("mutate,match", [
    (lambda r: b"XXXX" + r[4:], "magic"),
    (lambda r: r[:4] + struct.pack("<H", 2) + r[6:], "version 2"),
    (lambda r: r[:-3], "truncated"),
    (lambda r: r[:8], "truncated"),
    (lambda r: r + r[12:], "duplicate"),
])
def test_decode_rejects(mutate, match):
    raw = checkpoint.encode({}, {"w": np.ones(2, np.float32)})
    with pytest.raises(checkpoint.CheckpointError, match=match):
        checkpoint.decode(mutate(raw))


def test_unknown_dtype_rejected():
    raw = bytearray(checkpoint.encode({}, {"w": np.ones(2, np.float32)}))
    raw[10 + 2 + 2] = 7
    with pytest.raises(checkpoint.CheckpointError, match="dtype code 7"):
        checkpoint.decode(bytes(raw))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.encode({}, {"w": np.ones(2)})


def test_unknown_version_file_is_not_applied(tmp_path):
    net = random_net()
    path = tmp_path / "n.rpqw"
    checkpoint.save(path, net)
    raw = bytearray(path.read_bytes())
    raw[4:6] = struct.pack("<H", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(checkpoint.CheckpointError, match="version 99"):
        checkpoint.load(path)


def test_train_net_round_trip(tmp_path):
    net = random_net(NetConfig(depths=(1, 2), widths=(4, 6), strides=(1, 2), num_classes=5, stem_stride=2), seed=2)
    net.blocks[0].oabn_k = 0.5
    net.meta["epoch"] = 3
    path = tmp_path / "n.rpqw"
    checkpoint.save(path, net, {"phase": "oabn"})
    back, meta = checkpoint.load(path)
    assert meta["phase"] == "oabn" and back.meta["epoch"] == 3
    assert back.config == net.config and back.stem_stride == 2
    assert back.blocks[0].oabn_k == 0.5
    assert [p.data.tobytes() for p in back.parameters()] == [p.data.tobytes() for p in net.parameters()]
    for a, b in zip(net.blocks, back.blocks):
        for sa, sb in zip(a.bn_states(), b.bn_states()):
            assert sa.running_var.tobytes() == sb.running_var.tobytes() and sa.tracked == sb.tracked
    checkpoint.save(tmp_path / "again.rpqw", back, {"phase": "oabn"})
    assert (tmp_path / "again.rpqw").read_bytes() == path.read_bytes()


@pytest.mark.parametrize("scheme", ["cluster", "uniform"])
def test_deployed_round_trip(tmp_path, scheme):
    from reparamquant.pipeline import quantize_uniform

    net = random_net(seed=3)
    dnet = convert_to_vgg(net)
    x = np.random.default_rng(4).normal(size=(6, 3, 8, 8)).astype(np.float32)
    dq = quantize_cluster(dnet, 3) if scheme == "cluster" else quantize_uniform(dnet, 5)
    dq = with_act_quant(dq, 6, [x])
    path = tmp_path / "d.rpqw"
    checkpoint.save(path, dq)
    back, _ = checkpoint.load(path)
    assert isinstance(back, DeployedNet)
    for a, b in zip(dq.weight_quant, back.weight_quant):
        assert a.codes.tobytes() == b.codes.tobytes() and a.spec.scheme == b.spec.scheme
    assert deployed_forward(back, x).tobytes() == deployed_forward(dq, x).tobytes()
    checkpoint.save(tmp_path / "again.rpqw", back)
    assert (tmp_path / "again.rpqw").read_bytes() == path.read_bytes()


# ---------------------------------------------------------------------------
# config documents
# ---------------------------------------------------------------------------

def test_document_overrides_preset():
    cfg = load_document(TINY_DOC)
    assert cfg.preset == "desk-synthetic-oabn"
    assert cfg.train.k == 0.5 and cfg.train.epochs_oabn == 2
    assert cfg.net == NetConfig((1, 1), (4, 4), (1, 2), 3, 4)
    assert cfg.data.samples == 200


def test_document_round_trip():
    cfg = load_document(TINY_DOC + "k = inf\nout_dir = somewhere\n")
    again = load_document(format_document(cfg))
    assert again == cfg and again.train.k == float("inf")
    assert load_document("k = none\n").train.k is None


@pytest.mark.parametrize("doc,key", [
    ("bogus = 1\n", "bogus"),
    ("epochs_oabn = 2\nepochs_oabn = 3\n", "epochs_oabn"),
    ("epochs_oabn = two\n", "epochs_oabn"),
    ("oabn_warmup = 50\nepochs_oabn = 10\n", "oabn_warmup"),
    ("strides = 3,1,1,1\n", "strides"),
    ("dataset = mnist\n", "dataset"),
])
def test_document_fails_closed(doc, key):
    with pytest.raises(ConfigError) as err:
        load_document(doc)
    assert err.value.key == key


def test_document_syntax_errors_name_the_line():
    with pytest.raises(ConfigError, match="cfg:2"):
        parse_document("k = 1\njust words\n", "cfg")
    with pytest.raises(ConfigError, match="preset"):
        load_document("preset = nope\n")


def test_presets_load():
    for name in PRESETS:
        cfg = get_preset(name)
        cfg.validate()
        assert cfg.preset == name
    assert get_preset("paper-cifar10").net.depths == (4, 8, 12, 1)
    assert get_preset("paper-imagenet").net.widths == (48, 96, 192, 1280)
    assert get_preset("desk-synthetic").train.k is None


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_DOC)
    runs = []
    for name in ("a", "b"):
        out = root / name
        assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        runs.append(out)
    return cfg, runs


def test_train_writes_phase_checkpoints_and_report(trained):
    _, (out, _) = trained
    names = sorted(p.name for p in out.iterdir())
    assert names == ["ckpt_fp32.rpqw", "ckpt_init.rpqw", "ckpt_oabn.rpqw", "ckpt_qat.rpqw",
                     "config.txt", "deployed_qat.rpqw", "report.txt"]
    kv, rows = parse_report_text((out / "report.txt").read_text())
    for key in ("fp32_accuracy", "quant.uniform.w8a8.accuracy", "quant.cluster_qat.w4a8.accuracy"):
        assert 0.0 <= float(kv[key]) <= 100.0
    assert "outliers.mean_ratio" in kv and "outliers.pooled_pearson_r" in kv
    assert int(kv["quant.cluster_qat.w4a8.state_size"]) <= 16 * 2
    assert [r["phase"] for r in rows] == ["fp32", "oabn", "cluster_qat"]


def test_train_is_byte_deterministic(trained):
    _, (a, b) = trained
    for f in a.iterdir():
        if f.name == "config.txt":
            # only the out_dir line may differ
            diff = set(f.read_text().splitlines()) ^ set((b / f.name).read_text().splitlines())
            assert {l.split(" = ")[0] for l in diff} == {"out_dir"}
        else:
            assert f.read_bytes() == (b / f.name).read_bytes(), f.name


def test_train_with_zero_epochs_writes_init_only(tmp_path, capsys):
    cfg = tmp_path / "zero.cfg"
    cfg.write_text(TINY_DOC.replace("epochs_oabn = 2", "epochs_oabn = 0").replace("oabn_warmup = 1", "oabn_warmup = 0")
                   .replace("epochs_cluster = 1", "epochs_cluster = 0"))
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert sorted(p.name for p in (tmp_path / "o").glob("*.rpqw")) == ["ckpt_init.rpqw"]


def test_bad_config_key_exits_before_training(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(TINY_DOC + "learning_rate = 0.1\n")
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "learning_rate" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_imagenet_preset_has_no_loader(tmp_path, capsys):
    assert cli.main(["train", "--preset", "paper-imagenet", "--out", str(tmp_path / "o")]) == 1
    assert "imagenet" in capsys.readouterr().err


def test_merge_matches_train_structure(trained, tmp_path):
    cfg, (out, _) = trained
    assert cli.main(["merge", str(out / "ckpt_oabn.rpqw"), "--out", str(tmp_path)]) == 0
    dnet, meta = checkpoint.load(tmp_path / "deployed.rpqw")
    net, _ = checkpoint.load(out / "ckpt_oabn.rpqw")
    assert meta["merged_from"].endswith("ckpt_oabn.rpqw") and meta["source_phase"] == "oabn"
    x = np.random.default_rng(0).normal(size=(8, 3, 8, 8)).astype(np.float32)
    with no_grad():
        ref = net_forward(net, Tensor(x), "eval").data
    assert np.abs(deployed_forward(dnet, x) - ref).max() <= 1e-4
    assert cli.main(["merge", str(tmp_path / "deployed.rpqw"), "--out", str(tmp_path / "again")]) == 1


def test_merge_fresh_net_warns(trained, tmp_path):
    _, (out, _) = trained
    with pytest.warns(UserWarning, match="uninitialized"):
        assert cli.main(["merge", str(out / "ckpt_init.rpqw"), "--out", str(tmp_path)]) == 0


def test_quantize_uniform_and_cluster(trained, tmp_path, capsys):
    cfg, (out, _) = trained
    src = out / "ckpt_oabn.rpqw"
    assert cli.main(["quantize", str(src), "--config", str(cfg), "--scheme", "uniform", "--bits-w", "8",
                     "--out", str(tmp_path / "u")]) == 0
    kv = dict(l.split("=", 1) for l in (tmp_path / "u" / "quantize_report.txt").read_text().splitlines())
    assert int(kv["state_size"]) <= 255 * 2
    dq, _ = checkpoint.load(tmp_path / "u" / "quantized.rpqw")
    assert int(kv["state_size"]) == quant.state_size(dq)

    for d in ("c1", "c2"):
        assert cli.main(["quantize", str(src), "--config", str(cfg), "--scheme", "cluster", "--bits-w", "3",
                         "--out", str(tmp_path / d)]) == 0
    kv = dict(l.split("=", 1) for l in (tmp_path / "c1" / "quantize_report.txt").read_text().splitlines())
    assert all(int(kv[f"layer{i}.distinct"]) <= 8 for i in range(2))
    assert (tmp_path / "c1" / "quantized.rpqw").read_bytes() == (tmp_path / "c2" / "quantized.rpqw").read_bytes()

    assert cli.main(["quantize", str(src), "--config", str(cfg), "--bits-w", "9", "--out", str(tmp_path / "x")]) == 1
    assert cli.main(["quantize", str(tmp_path / "c1" / "quantized.rpqw"), "--config", str(cfg)]) == 1


def test_diagnose_matches_direct_report(trained, tmp_path, capsys):
    _, (out, _) = trained
    assert cli.main(["diagnose", str(out / "ckpt_oabn.rpqw"), "--layers", "1", "--out", str(tmp_path / "t")]) == 0
    assert [p.name for p in sorted((tmp_path / "t").glob("*.csv"))] == ["heatmap_layer1.csv"]
    net, _ = checkpoint.load(out / "ckpt_oabn.rpqw")
    direct = "\n".join(f"{k}={v!r}" for k, v in outlier_report(net).summary().items()) + "\n"
    assert (tmp_path / "t" / "outliers.txt").read_text() == direct

    cli.main(["merge", str(out / "ckpt_oabn.rpqw"), "--out", str(tmp_path / "m")])
    assert cli.main(["diagnose", str(tmp_path / "m" / "deployed.rpqw"), "--out", str(tmp_path / "d")]) == 0
    assert len(list((tmp_path / "d").glob("heatmap_layer*.csv"))) == 2
    assert (tmp_path / "d" / "outliers.txt").read_text() == direct
    assert cli.main(["diagnose", str(out / "ckpt_oabn.rpqw"), "--layers", "5", "--out", str(tmp_path / "e")]) == 1


def test_eval_and_missing_checkpoint(trained, tmp_path, capsys):
    cfg, (out, _) = trained
    assert cli.main(["eval", str(out / "ckpt_oabn.rpqw"), "--config", str(cfg), "--out", str(tmp_path)]) == 0
    acc = float(capsys.readouterr().out.strip().split("=")[1])
    net, _ = checkpoint.load(out / "ckpt_oabn.rpqw")
    data = cli.load_dataset(load_document(TINY_DOC).data)
    assert acc == evaluate(net, data.x_test, data.y_test)
    assert (tmp_path / "eval.txt").exists()
    assert cli.main(["eval", str(tmp_path / "nope.rpqw"), "--config", str(cfg)]) == 1


def test_flag_overrides(trained):
    cfg, _ = trained
    args = cli.build_parser().parse_args(["train", "--config", str(cfg), "--seed", "7", "--k", "none",
                                          "--bits-w", "3", "--scheme", "uniform"])
    rc = cli.resolve_config(args)
    assert (rc.train.seed, rc.train.k, rc.train.weight_bits, rc.qat_scheme) == (7, None, 3, "uniform")
