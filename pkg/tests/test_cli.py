import csv
import hashlib

import pytest

from prism import cli, condenser, evaluation

TINY = """\
[run]
seed = 3

[data]
programs = translate-right, bounce, orbit
geometry = 8, 16, 16, 3
train_per_class = 3
test_per_class = 2

[model]
widths = 2, 3

[condense]
iterations = 10
real_batch = 2
{condense}

[eval]
epochs = 1
batch_size = 4
repeats = 1

[methods]
list = prism, random, herding
"""


def _config(tmp_path, condense=""):
    path = tmp_path / "run.ini"
    path.write_text(TINY.format(condense=condense))
    return path


def _run(*argv):
    return cli.main([str(a) for a in argv])


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture()
def workspace(tmp_path):
    cfg = _config(tmp_path)
    out = tmp_path / "out"
    assert _run("gen-data", "--config", cfg, "--out", out) == 0
    return cfg, out


def test_gen_data_is_deterministic(tmp_path, workspace):
    cfg, out = workspace
    blob = (out / "dataset.pvdc").read_bytes()
    assert blob[:4] == b"PVDC"
    assert _run("gen-data", "--config", cfg, "--out", tmp_path / "again") == 0
    again = (tmp_path / "again" / "dataset.pvdc").read_bytes()
    assert hashlib.sha256(blob).hexdigest() == hashlib.sha256(again).hexdigest()
    assert (out / "gen-data.log.json").exists()


def test_missing_program_list_is_a_config_error(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[data]\ngeometry = 8, 16, 16, 3\n")
    assert _run("gen-data", "--config", cfg, "--out", tmp_path / "o") == 2
    assert "programs" in capsys.readouterr().err


def test_bad_value_names_the_line(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text(TINY.format(condense="lr = fast"))
    assert _run("gen-data", "--config", cfg, "--out", tmp_path / "o") == 2
    err = capsys.readouterr().err
    assert "lr" in err and "bad.ini:" in err


def test_missing_config_file_and_dataset(tmp_path, capsys):
    assert _run("gen-data", "--config", tmp_path / "nope.ini") == 4
    cfg = _config(tmp_path)
    assert _run("condense", "--config", cfg, "--out", tmp_path / "empty") == 4
    assert "dataset.pvdc" in capsys.readouterr().err


def test_condense_artifacts(workspace, capsys):
    cfg, out = workspace
    assert _run("condense", "--config", cfg, "--out", out) == 0
    videos, geometry = condenser.load(out / "condensed.pvsc")
    storage = evaluation.storage_of(videos, geometry)
    summary = capsys.readouterr().out
    assert f"{storage.frames} key frames, {storage.bytes} bytes" in summary
    assert len(_rows(out / "loss.csv")) - 1 == 10
    assert _rows(out / "loss.csv")[0] == list(cli.LOSS_HEADER)
    assert (out / "frames").is_dir() and any((out / "frames").iterdir())


def test_disabled_insertion_logs_header_only(tmp_path):
    cfg = _config(tmp_path, "insertion = disabled")
    out = tmp_path / "out"
    assert _run("gen-data", "--config", cfg, "--out", out) == 0
    assert _run("condense", "--config", cfg, "--out", out) == 0
    assert _rows(out / "insertions.csv") == [list(cli.INSERTION_HEADER)]


def test_numeric_abort_exit_code(tmp_path, capsys):
    cfg = _config(tmp_path, "lr = 1e30")
    out = tmp_path / "out"
    assert _run("gen-data", "--config", cfg, "--out", out) == 0
    with pytest.warns(RuntimeWarning):
        assert _run("condense", "--config", cfg, "--out", out) == 3
    assert "iteration" in capsys.readouterr().err


def test_ablate_only_runs_two_configs(workspace):
    cfg, out = workspace
    assert _run("ablate", "--config", cfg, "--out", out, "--only", "no-insertion") == 0
    rows = _rows(out / "ablate" / "summary.csv")
    assert [r[0] for r in rows[1:]] == ["base", "no-insertion"]
    assert rows[2][1] == "insertion"
    assert sorted(p.name for p in (out / "ablate").iterdir() if p.is_dir()) == ["base", "no-insertion"]


def test_eval_and_report(workspace):
    cfg, out = workspace
    assert _run("condense", "--config", cfg, "--out", out) == 0
    assert _run("baseline", "--config", cfg, "--out", out) == 0
    for name in ("random", "herding", "kcenter"):
        assert _rows(out / f"coreset_{name}.csv")[0] == ["class_id", "rank", "video_index", "score"]
    assert _run("eval", "--config", cfg, "--out", out, "--repeats", "3", "--jobs", "2") == 0
    table = _rows(out / "eval.csv")
    assert len(table) - 1 == 3 * 3
    runs = _rows(out / "eval_runs.csv")
    cells = {}
    for r in runs[1:]:
        cells.setdefault((r[0], r[1]), []).append(r)
    assert len(cells) == 9 and all(len(v) == 3 for v in cells.values())
    assert _run("report", "--config", cfg, "--out", out) == 0
    assert len(_rows(out / "report.csv")) - 1 == 9


def test_report_merges_inputs_and_flags_missing(workspace, tmp_path, capsys):
    cfg, out = workspace
    a = tmp_path / "a.csv"
    a.write_text(",".join(evaluation.REPORT_HEADER) + "\nprism,conv3d-micro,0x1,0.5,0,2,1,1\n")
    assert _run("report", "--config", cfg, "--out", out, a, a) == 0
    assert len(_rows(out / "report.csv")) == 3
    assert _run("report", "--config", cfg, "--out", out, tmp_path / "missing.csv") == 4
    assert "missing.csv" in capsys.readouterr().err


def test_eval_without_condensed_set_is_missing(workspace):
    cfg, out = workspace
    assert _run("eval", "--config", cfg, "--out", out) == 4
