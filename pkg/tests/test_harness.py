import json

import numpy as np
import pytest

from distgan.cli import main
from distgan.config import parse_config
from distgan.harness import EXIT_ASSERT, EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, compare_runs, eval_epochs, execute

BASE = """\
name: small
seeds: {{data: 0, init: 1, train: 2}}
dataset: {{kind: ring, modes: 8, radius: 2.0, sigma: 0.05, per_mode: 8}}
partition: {{scheme: shard, users: 2}}
networks: {{preset: ring, hidden: 8}}
strategy:
  kind: {kind}
  epochs: {epochs}
  batch_real: 16
  batch_fake: 16
{extra}
evaluation: {{samples: 200, threshold_count: 5}}
"""


def config(kind="federated", epochs=4, extra=""):
    return parse_config(BASE.format(kind=kind, epochs=epochs, extra=extra))


def test_output_files_and_headers(tmp_path):
    out = execute(config(), tmp_path / "r", log=lambda *a: None)
    assert out.exit_code == EXIT_OK
    d = tmp_path / "r"
    assert (d / "metrics.csv").read_text().splitlines()[0] == "epoch,user_id,d_loss,g_loss,work_units,wall_ms"
    assert (d / "coverage.csv").read_text().splitlines()[0] == "epoch,covered_modes,quality"
    assert (d / "channel_log.txt").read_text().splitlines()[0] == "epoch,from,to,kind,bytes"
    assert (d / "samples_final.csv").read_text().splitlines()[0] == "x0,x1"
    assert (d / "timing.csv").read_text().splitlines()[0] == "epoch,wall_ms"
    assert "privacy flags: 0" in (d / "audit.txt").read_text()
    assert parse_config((d / "config_echo.yaml").read_text()).raw == config().raw
    assert (d / "checkpoint" / "generator.bin").exists()
    assert len((d / "metrics.csv").read_text().splitlines()) == 1 + 4 * 3
    assert len((d / "samples_final.csv").read_text().splitlines()) == 201


@pytest.mark.parametrize("kind", ["federated", "averaged", "round_robin", "baseline"])
def test_byte_identical_reruns(tmp_path, kind):
    a = execute(config(kind), tmp_path / "a", log=lambda *a: None)
    b = execute(config(kind), tmp_path / "b", log=lambda *a: None)
    assert a.exit_code == b.exit_code == EXIT_OK
    for f in ("metrics.csv", "channel_log.txt", "coverage.csv", "samples_final.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_epochs_zero(tmp_path):
    out = execute(config(epochs=0), tmp_path / "z", log=lambda *a: None)
    assert out.exit_code == EXIT_OK
    assert (tmp_path / "z" / "metrics.csv").read_text() == "epoch,user_id,d_loss,g_loss,work_units,wall_ms\n"
    assert (tmp_path / "z" / "coverage.csv").read_text().splitlines()[1].startswith("0,")
    assert len((tmp_path / "z" / "samples_final.csv").read_text().splitlines()) == 201


def test_eval_cadence():
    assert eval_epochs(100, None) == set(range(0, 101, 5))
    assert eval_epochs(7, None) == set(range(8))
    assert eval_epochs(10, 4) == {0, 4, 8, 10}


def test_wall_clock_opt_in(tmp_path):
    cfg = parse_config(BASE.format(kind="averaged", epochs=2, extra="") + "report_wall_clock: true\n")
    execute(cfg, tmp_path / "w", log=lambda *a: None)
    rows = (tmp_path / "w" / "metrics.csv").read_text().splitlines()[1:]
    assert all("." in r.rsplit(",", 1)[1] for r in rows)


def test_numeric_failure_exit_and_partial_metrics(tmp_path):
    out = execute(config("averaged", epochs=50, extra="  lr_d: 1.0e+150\n  lr_g: 1.0e+150"), tmp_path / "n",
                  log=lambda *a: None)
    assert out.exit_code == EXIT_NUMERIC
    assert json.loads((tmp_path / "n" / "summary.json").read_text())["status"] == "numeric_failure"
    assert (tmp_path / "n" / "metrics.csv").read_text().startswith("epoch,user_id")


def test_assert_mode(tmp_path):
    cfg = parse_config(BASE.format(kind="averaged", epochs=1, extra="") + "assert: {min_covered_modes: 8}\n")
    assert execute(cfg, tmp_path / "a", check=True, log=lambda *a: None).exit_code == EXIT_ASSERT
    assert execute(cfg, tmp_path / "b", check=False, log=lambda *a: None).exit_code == EXIT_OK


def test_compare_runs(tmp_path, capsys):
    execute(config("baseline", extra="  baseline_on: all"), tmp_path / "base", log=lambda *a: None)
    execute(config("federated"), tmp_path / "fed", log=lambda *a: None)
    rows = compare_runs([tmp_path / "base", tmp_path / "fed", tmp_path / "fed"], tmp_path / "cmp.csv")
    base, fed, fed2 = rows
    assert fed["max_user_work_units"] * 2 == base["max_user_work_units"] == 64
    assert fed["users"] == 2 and base["users"] == 1
    assert {k: v for k, v in fed.items()} == fed2
    header = (tmp_path / "cmp.csv").read_text().splitlines()[0]
    assert header == "run,strategy,users,total_work_units,max_user_work_units,wall_ms,covered_modes,final_g_loss"


def test_compare_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        compare_runs([tmp_path, tmp_path])


def test_cli_run_and_codes(tmp_path):
    good = tmp_path / "good.yaml"
    good.write_text(BASE.format(kind="round_robin", epochs=2, extra=""))
    assert main(["run", "--config", str(good), "--out", str(tmp_path / "o"), "--seed", "3"]) == EXIT_OK
    echo = parse_config((tmp_path / "o" / "config_echo.yaml").read_text())
    assert echo.seeds.train == 3
    bad = tmp_path / "bad.yaml"
    bad.write_text(BASE.format(kind="round_robin", epochs=2, extra="  speed: 11"))
    assert main(["run", "--config", str(bad)]) == EXIT_CONFIG


def test_cli_config_error_message(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(BASE.format(kind="round_robin", epochs=2, extra="  speed: 11"))
    main(["run", "--config", str(bad)])
    err = capsys.readouterr().err
    assert f"{bad}:11:" in err and "speed" in err


def test_cli_gradcheck(capsys):
    assert main(["gradcheck", "--trials", "20"]) == 0
    assert "max relative error" in capsys.readouterr().out
    assert main(["gradcheck", "--trials", "5", "--inject-sign-flip"]) != 0


def test_cli_gradcheck_seed_changes_nets_not_outcome(capsys):
    outs = []
    for seed in (1, 2):
        assert main(["gradcheck", "--trials", "20", "--seed", str(seed)]) == 0
        outs.append(capsys.readouterr().out)
    assert outs[0] != outs[1]


def test_cli_list_presets(capsys):
    assert main(["list-presets"]) == 0
    out = capsys.readouterr().out
    assert "ring" in out and "ring_round_robin" in out


def test_cli_compare(tmp_path, capsys):
    execute(config("averaged", epochs=1), tmp_path / "a", log=lambda *a: None)
    assert main(["compare", str(tmp_path / "a"), str(tmp_path / "a")]) == 0
    assert main(["compare", str(tmp_path / "a"), str(tmp_path / "missing")]) == EXIT_CONFIG
