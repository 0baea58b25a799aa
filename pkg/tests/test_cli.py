import csv
import io
import subprocess
import sys
from pathlib import Path

import pytest

from petlvit.checkpoint import load_checkpoint, to_bytes
from petlvit.cli import EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main

CONFIGS = Path(__file__).parents[1] / "configs"

QUICK = """
image_size=16 patch_size=8 in_channels=2 d=8 L=1 N_h=2 D=16
source_classes=3 source_shots=6 source_val_per_class=2 target_classes=3 target_shots=4 val_per_class=2
test_per_class=3 pretrain_epochs=2 pretrain_warmup_epochs=1 epochs=2 warmup_epochs=1 batch_size=8
h=2 r=2 l=2 s_grid=0.1,1
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def rows(text):
    return list(csv.reader(io.StringIO(text)))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "quick.cfg").write_text(QUICK)
    assert main(["pretrain", "--config", str(d / "quick.cfg"), "--out", str(d / "backbone.ckpt")]) == EXIT_OK
    return d


def test_count_params_vit_b(capsys, tmp_path):
    code, out, _ = run(capsys, "count-params", "--config", CONFIGS / "vit_b16.cfg", "--out", tmp_path / "c.csv")
    assert code == EXIT_OK
    table = rows((tmp_path / "c.csv").read_text())
    assert table[1][0] == "convpass" and table[1][2] == "327552" and table[1][-1] == "True"


def test_count_params_full_reports_no_prediction(capsys):
    code, out, _ = run(capsys, "count-params", "--config", CONFIGS / "vit_b16.cfg", "--method", "full")
    assert code == EXIT_OK and rows(out)[1][5] == "-1"


def test_unravel_fragment(capsys):
    code, out, _ = run(capsys, "unravel", "--config", CONFIGS / "unravel_fragment.cfg")
    assert code == EXIT_OK and rows(out) == [["total", "type_i", "type_ii", "type_iii"], ["16", "8", "4", "4"]]


def test_unravel_from_model_layout(capsys, tmp_path):
    (tmp_path / "c.cfg").write_text("L=1 method=adapter")
    code, out, _ = run(capsys, "unravel", "--config", tmp_path / "c.cfg")
    # the adapter is the last unit, so no attention can follow it
    assert code == EXIT_OK and rows(out)[1] == ["8", "4", "4", "0"]
    (tmp_path / "c.cfg").write_text("L=2 method=adapter")
    assert rows(run(capsys, "unravel", "--config", tmp_path / "c.cfg")[1])[1] == ["64", "16", "32", "16"]


def test_gradcheck_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--config", CONFIGS / "tiny.cfg", "--method", "lora")
    table = rows(out)
    assert code == EXIT_OK and table[0] == ["op", "max_rel_err", "checked", "status"]
    assert {"model[full]", "model[convpass]", "model[vpt]", "model[lora]"} <= {r[0] for r in table[1:]}
    assert all(r[3] == "ok" for r in table[1:])


def test_gradcheck_rejects_f32(capsys):
    assert run(capsys, "gradcheck", "--precision", "f32")[0] == EXIT_USAGE


def test_finetune_freeze_and_determinism(capsys, workdir):
    args = ["finetune", "--config", workdir / "quick.cfg", "--ckpt", workdir / "backbone.ckpt", "--method",
            "convpass"]
    c1, out1, _ = run(capsys, *args, "--out", workdir / "a.ckpt", "--log", workdir / "a.csv")
    c2, out2, _ = run(capsys, *args, "--out", workdir / "b.ckpt", "--log", workdir / "b.csv")
    assert c1 == c2 == EXIT_OK and out1 == out2
    assert (workdir / "a.ckpt").read_bytes() == (workdir / "b.ckpt").read_bytes()
    assert (workdir / "a.csv").read_bytes() == (workdir / "b.csv").read_bytes()
    row = dict(zip(*rows(out1)))
    assert row["method"] == "convpass" and row["trainable"] == row["predicted"]
    base, tuned = load_checkpoint(workdir / "backbone.ckpt"), load_checkpoint(workdir / "a.ckpt")
    for name in base.registry:
        if not name.startswith("head."):
            assert base.registry[name].data.tobytes() == tuned.registry[name].data.tobytes()


def test_eval_and_sweep(capsys, workdir):
    code, out, _ = run(capsys, "eval", "--config", workdir / "quick.cfg", "--ckpt", workdir / "backbone.ckpt",
                       "--task", "source")
    assert code == EXIT_OK and rows(out)[1][:3] == ["source", "test", "9"]
    code, out, _ = run(capsys, "sweep", "--config", workdir / "quick.cfg", "--ckpt", workdir / "backbone.ckpt",
                       "--method", "lora", "--out", workdir / "best.ckpt")
    table = rows(out)
    assert code == EXIT_OK and [r[1] for r in table[1:]] == ["0.1", "1.0"]
    assert sum(int(r[-1]) for r in table[1:]) == 1
    assert load_checkpoint(workdir / "best.ckpt").petl_spec.method == "lora"


def test_eval_class_mismatch_is_config_error(capsys, workdir, tmp_path):
    (tmp_path / "c.cfg").write_text(QUICK + "\ntarget_classes=5\n")
    code, _, err = run(capsys, "eval", "--config", tmp_path / "c.cfg", "--ckpt", workdir / "backbone.ckpt")
    assert code == EXIT_USAGE and "target_classes" in err


def test_arch_mismatch_exit_usage(capsys, workdir, tmp_path):
    (tmp_path / "c.cfg").write_text(QUICK.replace("d=8", "d=16"))
    code, _, err = run(capsys, "finetune", "--config", tmp_path / "c.cfg", "--ckpt", workdir / "backbone.ckpt",
                       "--out", tmp_path / "x.ckpt")
    assert code == EXIT_USAGE and "dim" in err


def test_precision_mismatch_exit_usage(capsys, workdir):
    code, _, err = run(capsys, "eval", "--config", workdir / "quick.cfg", "--ckpt", workdir / "backbone.ckpt",
                       "--precision", "f64")
    assert code == EXIT_USAGE and "precision" in err


def test_missing_and_truncated_checkpoint(capsys, workdir, tmp_path):
    assert run(capsys, "eval", "--ckpt", tmp_path / "none.ckpt")[0] == EXIT_IO
    data = (workdir / "backbone.ckpt").read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(data[: len(data) // 2])
    code, _, err = run(capsys, "eval", "--config", workdir / "quick.cfg", "--ckpt", tmp_path / "cut.ckpt")
    assert code == EXIT_IO and "I/O error" in err


def test_usage_errors(capsys, tmp_path):
    assert run(capsys, "bogus")[0] == EXIT_USAGE
    assert run(capsys, "pretrain")[0] == EXIT_USAGE  # --out missing
    (tmp_path / "c.cfg").write_text("d=30 N_h=4")
    code, _, err = run(capsys, "count-params", "--config", tmp_path / "c.cfg")
    assert code == EXIT_USAGE and "d (line 1)" in err and "N_h (line 1)" in err
    assert run(capsys, "count-params", "--config", tmp_path / "missing.cfg")[0] == EXIT_IO


def test_budget_mismatch_exit_numeric(capsys, monkeypatch):
    import petlvit.cli as cli

    real = cli.attach_petl

    def broken(model, spec, **kw):
        real(model, spec, **kw)
        model.registry.set_frozen("blocks.0.attn.q.weight", False)
        return model

    monkeypatch.setattr(cli, "attach_petl", broken)
    code, _, err = run(capsys, "count-params", "--method", "adapter")
    assert code == EXIT_NUMERIC and "blocks.0.attn.q.weight" in err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "petlvit", "unravel", "--config",
                           str(CONFIGS / "unravel_fragment.cfg")], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.splitlines()[1] == "16,8,4,4"


def test_checkpoint_written_by_cli_round_trips(workdir):
    data = (workdir / "backbone.ckpt").read_bytes()
    assert to_bytes(load_checkpoint(workdir / "backbone.ckpt")) == data
