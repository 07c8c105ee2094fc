import csv
import json

import pytest

from feedmesh import cli, harness
from feedmesh.harness import (CSV_HEADER, ConfigError, ExperimentConfig, GeneratorSpec,
                              SummaryError, feed_series, load_config, read_csv, run_experiment,
                              summarize)

DDL = """\
create type Tweet as open { tweetId: string, message-text: string };
create dataset Tweets(Tweet) primary key tweetId on nodegroup (C);
create feed F using TweetGenAdaptor ("datasource"="${gen0}, ${gen1}");
connect feed F to dataset Tweets using policy Basic;
"""


def write(path, text):
    path.write_text(text)
    return str(path)


@pytest.fixture
def run_file(tmp_path):
    write(tmp_path / "feed.ddl", DDL)
    write(tmp_path / "faults.txt", "250 kill-node B\n")
    return write(tmp_path / "run.cfg", """\
# two generators at 500 rec/s for 3 s
nodes = 3
seed = 7
generators = 2x500x3
ddl = feed.ddl
faults = faults.txt
metrics = out
run = small
node_disk = 20
policy.Basic.excess.records.discard = true
at.400 = show pipelines;
""")


def test_generator_spec():
    assert GeneratorSpec.parse("4x2000x60") == GeneratorSpec(4, 2000.0, 60.0)
    assert GeneratorSpec.parse("1x10x2:pull").pull
    for bad in ("4x2000", "ax1x1", "0x1x1", "1x-1x1"):
        with pytest.raises(ConfigError):
            GeneratorSpec.parse(bad)


def test_load_config(run_file, tmp_path):
    cfg = load_config(run_file)
    assert cfg.node_names() == ["A", "B", "C"]
    assert cfg.seed == 7 and cfg.run_name == "small"
    assert cfg.generators == [GeneratorSpec(2, 500.0, 3.0)]
    assert cfg.ddl == str(tmp_path / "feed.ddl")
    assert cfg.engine == {"node_disk": 20.0}
    assert cfg.policy_overrides == {"Basic": {"excess.records.discard": "true"}}
    assert cfg.statements == {400: ["show pipelines;"]}
    assert cfg.addresses() == ["gen0:9000", "gen1:9000"]


@pytest.mark.parametrize("line", ["bogus = 1", "mode = fast", "at.x = show catalog;",
                                  "policy.Basic = x", "no delimiter here"])
def test_config_errors(tmp_path, line):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path / "bad.cfg", line + "\n"))


def test_missing_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "absent.cfg"))
    with pytest.raises(ConfigError):
        ExperimentConfig(ddl=str(tmp_path / "none.ddl")).script()
    with pytest.raises(ConfigError):
        ExperimentConfig().script()


def test_node_names():
    assert ExperimentConfig(nodes=30).node_names()[:2] == ["N00", "N01"]
    assert ExperimentConfig(nodes=["X", "Y"]).node_names() == ["X", "Y"]
    with pytest.raises(ConfigError):
        ExperimentConfig(nodes=0).node_names()


def test_run_experiment_outputs(run_file):
    cfg = load_config(run_file)
    res = run_experiment(cfg)
    assert res.ok
    rows = list(csv.reader(open(res.csv_path)))
    assert rows[0] == CSV_HEADER
    feeds = {r[1] for r in rows[1:]}
    assert feeds == {"F"}
    nodes = {r[2] for r in rows[1:]}
    assert "source" in nodes
    summary = json.load(open(res.summary_path))
    acct = summary["pipelines"][0]["accounting"]
    assert acct["generated"] == 3000
    assert summary["datasets"]["Tweets"] == acct["ingested"]
    assert summary["kills"][0]["node"] == "B"
    # windows are 2 s apart and rates are per second
    starts = sorted({float(r[0]) for r in rows[1:]})
    assert starts[:2] == [0.0, 2.0]
    series = feed_series(read_csv(res.csv_path), "F")
    assert sum(series.values()) * 2 == pytest.approx(acct["ingested"], abs=1)


def test_source_rows_report_generation(run_file):
    res = run_experiment(load_config(run_file))
    rows = read_csv(res.csv_path)
    gen = sum(r["inflow"] for r in rows if r["node"] == "source") * 2
    assert gen == pytest.approx(3000)


def test_summarize_reads_sidecar(run_file):
    res = run_experiment(load_config(run_file))
    s = summarize(res.csv_path)
    assert s.identity is True
    assert [f.label for f in s.feeds] == ["F"]
    assert "F" in s.accounting
    text = harness.format_summary(s)
    assert "accounting identity: holds" in text


def test_summarize_dip_detection(tmp_path):
    path = tmp_path / "m.csv"
    lines = [",".join(CSV_HEADER)]
    for t, v in [(0, 1000), (2, 1000), (4, 100), (6, 1000), (8, 1000), (10, 300)]:
        lines.append(f"{t:.2f},F,A,{v},{v},0,0,0")
    write(path, "\n".join(lines) + "\n")
    s = summarize(str(path))
    assert s.feeds[0].dips == [4.0]
    assert s.feeds[0].recoveries == [2.0]
    assert s.identity is None


def test_malformed_csv(tmp_path):
    bad_header = write(tmp_path / "a.csv", "x,y\n1,2\n")
    with pytest.raises(SummaryError):
        read_csv(bad_header)
    bad_row = write(tmp_path / "b.csv", ",".join(CSV_HEADER) + "\n0.00,F,A,x,1,0,0,0\n")
    with pytest.raises(SummaryError, match=":2"):
        read_csv(bad_row)
    with pytest.raises(SummaryError):
        read_csv(str(tmp_path / "missing.csv"))


def test_cli_run_and_summarize(run_file, capsys):
    assert cli.main(["run", "--config", run_file]) == 0
    out = capsys.readouterr().out
    assert "== small:" in out and "accounting identity: holds" in out
    csv_path = run_file.replace("run.cfg", "out/small.csv")
    assert cli.main(["summarize", csv_path]) == 0


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["run"]) == 2
    assert cli.main(["summarize", str(tmp_path / "nope.csv")]) == 2
    bad_ddl = write(tmp_path / "x.ddl", "create nonsense;")
    cfg = write(tmp_path / "x.cfg", f"nodes = 2\ngenerators = 1x10x1\nddl = {bad_ddl}\n")
    assert cli.main(["run", "--config", cfg]) == 2
    err = capsys.readouterr().err
    assert "unknown statement form" in err


def test_cli_summarize_identity_violation(tmp_path):
    csv_path = tmp_path / "v.csv"
    write(csv_path, ",".join(CSV_HEADER) + "\n0.00,F,A,1.0,1.0,0,0,0\n")
    (tmp_path / "v.summary.json").write_text(json.dumps({"identity_holds": False, "pipelines": []}))
    assert cli.main(["summarize", str(csv_path)]) == 1


def test_real_mode_small(tmp_path):
    write(tmp_path / "feed.ddl", DDL)
    cfg_path = write(tmp_path / "real.cfg", "mode = real\nnodes = 3\ngenerators = 2x200x1\n"
                                            "ddl = feed.ddl\nmetrics = out\nrun = real\n")
    res = run_experiment(load_config(cfg_path))
    acct = res.summary["pipelines"][0]["accounting"]
    assert res.ok
    assert acct["generated"] == 400 and acct["ingested"] == 400


def test_snapshot_written(run_file, tmp_path):
    res = run_experiment(load_config(run_file))
    part = tmp_path / "out" / "small.work" / "data" / "Tweets" / "0.ndjson"
    lines = part.read_text().splitlines()
    assert len(lines) == res.summary["datasets"]["Tweets"]
    assert all(json.loads(line)["tweetId"] for line in lines)
