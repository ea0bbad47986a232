import csv
import socket
import threading

import numpy as np
import pytest

from fedqklstm.cli import GRID_HEADER, main, run_grid
from fedqklstm.config import ConfigError, ExperimentConfig, parse_config_text
from fedqklstm.data import load_dataset
from fedqklstm.federated.checkpoint import deserialize_checkpoint
from fedqklstm.metrics import compute_metrics

TINY_CONF = """\
# tiny end-to-end setup
synth.classes = 3
synth.windows_per_class = 12
synth.window = 16
synth.channels = 2
model.conv_filters = 4
model.conv_width = 3
model.hidden = 4
model.landmarks = 4
model.lstm_layers = 1
model.dropout = 0.1
optim.lr = 0.01
fed.clients = 2
fed.local_epochs = 1
fed.rounds = 2
fed.batch_size = 8
"""


@pytest.fixture
def conf(tmp_path):
    path = tmp_path / "tiny.conf"
    path.write_text(TINY_CONF)
    return path


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# -----------------------------------------------------------------------------
# Metrics
# -----------------------------------------------------------------------------


def test_metrics_two_class_hand_example():
    report = compute_metrics(np.array([[8, 2], [3, 7]]))
    assert report.accuracy == 0.75
    np.testing.assert_allclose(report.per_class_precision, [8 / 11, 7 / 9])
    np.testing.assert_allclose(report.per_class_recall, [0.8, 0.7])
    f1 = [2 * (8 / 11) * 0.8 / (8 / 11 + 0.8), 2 * (7 / 9) * 0.7 / (7 / 9 + 0.7)]
    assert report.f1 == pytest.approx(np.mean(f1), abs=1e-15)
    # class F1s are 16/21 and 14/19 exactly
    assert report.f1 == pytest.approx(299 / 399, abs=1e-15)


def test_metrics_absent_class_contributes_zero():
    report = compute_metrics(np.array([[5, 0, 0], [0, 5, 0], [0, 0, 0]]))
    assert report.accuracy == 1.0
    assert report.f1 == pytest.approx(2 / 3)


@pytest.mark.parametrize("c", [1, 2, 5, 9])
def test_metrics_diagonal_all_ones(c):
    report = compute_metrics(np.diag(np.arange(1, c + 1)))
    assert report.accuracy == report.precision == report.recall == report.f1 == 1.0


def test_metrics_empty_matrix():
    with pytest.raises(ValueError):
        compute_metrics(np.zeros((3, 3), dtype=int))


# -----------------------------------------------------------------------------
# Configuration
# -----------------------------------------------------------------------------


def test_config_parsing_and_types():
    values = parse_config_text("fed.rounds = 7  # comment\n\nmodel.gate_bias=yes\noptim.lr=3e-3\n")
    assert values == {"fed.rounds": 7, "model.gate_bias": True, "optim.lr": 3e-3}


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="fed.round"):
        parse_config_text("fed.round = 3")


def test_bad_value_and_line():
    with pytest.raises(ConfigError, match="fed.rounds"):
        parse_config_text("fed.rounds = many")
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("just words")


def test_missing_data_path_is_named():
    cfg = ExperimentConfig.load(overrides={"data.source": "rwhar"})
    with pytest.raises(ConfigError, match="data.path"):
        cfg.load_dataset()


def test_resolved_text_round_trips():
    cfg = ExperimentConfig.load(overrides={"fed.rounds": "4", "model.hidden": "8"})
    again = ExperimentConfig.load(overrides=parse_config_text(cfg.resolved_text()))
    assert again.values == cfg.values


def test_cli_unknown_key_exit_code(conf, capsys):
    assert main(["fed-sim", "--config", str(conf), "--set", "fed.nope=1"]) == 2
    assert "fed.nope" in capsys.readouterr().err


# -----------------------------------------------------------------------------
# Commands
# -----------------------------------------------------------------------------


def test_kernel_check_passes(capsys):
    assert main(["kernel-check"]) == 0
    out = capsys.readouterr().out
    deviation = float(out.split("max closed-form deviation:")[1].split()[0])
    assert deviation < 1e-10
    assert out.strip().endswith("PASS")


def test_count_params_classical_block(capsys):
    args = ["count-params", "--set", "model.baseline=true", "--set", "model.lstm_layers=1",
            "--set", "model.input_channels=3", "--set", "model.window=100",
            "--set", "model.num_classes=8", "--compare"]
    assert main(args) == 0
    out = capsys.readouterr().out
    assert "33,024" in out
    assert "6,656" in out


def test_fed_sim_writes_artifacts(conf, tmp_path):
    out = tmp_path / "run"
    assert main(["fed-sim", "--config", str(conf), "--out", str(out)]) == 0
    rows = read_rows(out / "metrics.csv")
    assert rows[0][:5] == ["round", "accuracy", "precision", "recall", "f1"]
    assert len(rows) == 3
    resolved = (out / "config.resolved").read_text()
    assert "fed.rounds=2" in resolved
    params = deserialize_checkpoint((out / "final.fqkc").read_bytes())
    assert "lstm0.landmarks" in params


def test_fed_sim_rerun_is_byte_identical(conf, tmp_path):
    for name in ("a", "b"):
        assert main(["fed-sim", "--config", str(conf), "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_train_then_eval(conf, tmp_path, capsys):
    out = tmp_path / "central"
    assert main(["train", "--config", str(conf), "--out", str(out)]) == 0
    assert len(read_rows(out / "metrics.csv")) == 3
    capsys.readouterr()
    assert main(["eval", "--config", str(conf), "--out", str(out)]) == 0
    assert "f1=" in capsys.readouterr().out


def test_eval_rejects_mismatched_checkpoint(conf, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["fed-sim", "--config", str(conf), "--out", str(out)]) == 0
    code = main(["eval", "--config", str(conf), "--out", str(out), "--set", "model.hidden=5"])
    assert code == 2
    assert "does not match" in capsys.readouterr().err


def test_gen_synth_writes_cache(conf, tmp_path):
    out = tmp_path / "synth"
    assert main(["gen-synth", "--config", str(conf), "--out", str(out)]) == 0
    ds = load_dataset(out / "synthetic.fqkd")
    assert ds.windows.shape == (36, 16, 2)
    cached = tmp_path / "cached"
    args = ["fed-sim", "--config", str(conf), "--out", str(cached),
            "--set", "data.source=cache", "--set", f"data.path={out / 'synthetic.fqkd'}"]
    assert main(args) == 0
    direct = tmp_path / "direct"
    assert main(["fed-sim", "--config", str(conf), "--out", str(direct)]) == 0
    assert (cached / "metrics.csv").read_bytes() == (direct / "metrics.csv").read_bytes()


def test_server_and_clients_match_fed_sim(conf, tmp_path):
    sim = tmp_path / "sim"
    assert main(["fed-sim", "--config", str(conf), "--out", str(sim)]) == 0
    address = f"127.0.0.1:{free_port()}"
    codes = {}

    def client(cid):
        codes[cid] = main(["fed-client", "--config", str(conf), "--connect", address,
                           "--client-id", str(cid)])

    threads = [threading.Thread(target=client, args=(c,), daemon=True) for c in range(2)]
    for t in threads:
        t.start()
    tcp = tmp_path / "tcp"
    assert main(["fed-server", "--config", str(conf), "--listen", address, "--out", str(tcp)]) == 0
    for t in threads:
        t.join(60)
    assert codes == {0: 0, 1: 0}
    assert (tcp / "metrics.csv").read_bytes() == (sim / "metrics.csv").read_bytes()


def test_client_id_out_of_range(conf):
    args = ["fed-client", "--config", str(conf), "--connect", "127.0.0.1:1", "--client-id", "5"]
    assert main(args) == 2


# -----------------------------------------------------------------------------
# Grid
# -----------------------------------------------------------------------------


def test_grid_single_cell_rows(conf, tmp_path):
    cfg = ExperimentConfig.load(conf, {"fed.rounds": "3"})
    path = tmp_path / "grid.csv"
    assert run_grid(cfg, [2], [1], path)
    rows = read_rows(path)
    assert rows[0] == GRID_HEADER
    assert len(rows) == 4
    assert [r[2] for r in rows[1:]] == ["0", "1", "2"]


def test_grid_command_records_failed_cell(conf, tmp_path):
    out = tmp_path / "grid"
    # 40 clients cannot be dealt from 28 training windows
    code = main(["grid", "--config", str(conf), "--out", str(out),
                 "--clients", "2,40", "--epochs", "1"])
    assert code == 1
    rows = read_rows(out / "grid.csv")
    assert len(rows) == 1 + 2 + 1
    assert rows[-1] == ["40", "1", "", "", "", "", ""]
