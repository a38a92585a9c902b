"""Command line interface and configuration files."""

from __future__ import annotations

import io
import json
from pathlib import Path

import pytest

from asyncfl.cli import main
from asyncfl.config import ConfigError, build_sim_config, parse_config, read_plan_file
from asyncfl.objective import write_libsvm
from asyncfl.simulator import run

from conftest import synthetic_dataset

BASE = """\
[data]
path = data.libsvm
[clients]
n = 3
[objective]
lambda = 1/N
[schedule]
kind = linear
a = 4
b = 8
[step]
kind = iteration-diminishing
eta0 = 0.1
beta = 0.001
[delay]
kind = affine
M1 = 40
slope = 0.5
[network]
up = uniform:0,10
down = uniform:0,10
[run]
K = 800
"""


def call(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main(list(argv), out=out, err=err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture
def workdir(tmp_path):
    write_libsvm(synthetic_dataset(240, 5, seed=3), tmp_path / "data.libsvm")
    return tmp_path


def write_cfg(dirpath: Path, text: str, name: str = "exp.cfg") -> str:
    p = dirpath / name
    p.write_text(text)
    return str(p)


# --------------------------------------------------------------------------
# configuration


def test_minimal_single_client_config(workdir):
    path = write_cfg(workdir, "[data]\npath = data.libsvm\n[run]\nK = 50\n")
    exp = parse_config(path)
    assert len(exp.clients) == 1 and exp.K == 50


def test_probability_sum_reported(workdir):
    path = write_cfg(workdir, BASE.replace("n = 3", "n = 2\nprobs = 0.5, 0.6"))
    with pytest.raises(ConfigError) as info:
        parse_config(path)
    assert any("1.1" in e for e in info.value.errors)


def test_eq4_violation_rejected_before_run(workdir):
    text = (BASE.replace("kind = linear\na = 4\nb = 8", "kind = table\nsizes = 1, 2, 4, 8, 16, 32, 64")
            .replace("M1 = 40\nslope = 0.5", "M1 = 3\nslope = 0.0")
            + "[gate]\nmode = exact\n")
    with pytest.raises(ConfigError) as info:
        parse_config(write_cfg(workdir, text))
    assert any("i=2" in e for e in info.value.errors)


def test_all_errors_collected(workdir):
    text = "[data]\npath = missing.libsvm\n[clients]\nn = zero\n[run]\n"
    with pytest.raises(ConfigError) as info:
        parse_config(write_cfg(workdir, text))
    assert len(info.value.errors) >= 2


def test_unknown_section(workdir):
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config(write_cfg(workdir, BASE + "[extras]\nx = 1\n"))


def test_seed_override_controls_everything(workdir):
    path = write_cfg(workdir, BASE)
    a = run(build_sim_config(parse_config(path, seed=1)))
    b = run(build_sim_config(parse_config(path, seed=1)))
    c = run(build_sim_config(parse_config(path, seed=2)))
    assert a.to_csv() == b.to_csv() != c.to_csv()


# --------------------------------------------------------------------------
# subcommands


def test_run_twice_identical_csv(workdir):
    path = write_cfg(workdir, BASE)
    first = call("run", "--config", path, "--seed", "7")
    second = call("run", "--config", path, "--seed", "7")
    assert first[0] == 0 and first[1] == second[1]
    assert first[1].startswith("round,time,train_loss")


def test_run_writes_outputs(workdir):
    path = write_cfg(workdir, BASE)
    csv, ev = workdir / "m.csv", workdir / "ev.jsonl"
    code, out, _ = call("run", "--config", path, "--csv", str(csv), "--log-events", str(ev))
    assert code == 0 and csv.exists() and ev.exists()
    assert "T=" in out and "final_accuracy=" in out


def test_plan_example(tmp_path):
    out_file = tmp_path / "plan.cfg"
    code, out, err = call("plan", "--s0c", "16", "--nc", "10000", "--p", "1", "--eps", "1",
                          "--sigma", "8", "--r0", "1/e", "--k", "25000", "--out", str(out_file))
    assert code == 0, err
    values = dict(line.split("=", 1) for line in out.splitlines() if "=" in line)
    assert int(values["T"]) == 195
    assert abs(float(values["q"]) / 1.3216327772100012e-4 - 1) < 5e-3
    assert values["schedule_head"].startswith("16,18,19,20")
    plan = read_plan_file(out_file)
    assert sum(int(x) for x in plan["schedule"].split(",")) == 25000


def test_plan_cap_warning():
    code, _, err = call("plan", "--s0c", "16", "--nc", "25000", "--p", "1", "--eps", "2",
                        "--sigma", "8", "--r0", "0.0247", "--k", "125000")
    assert code == 0 and "exceeds" in err


def test_plan_infeasible_exit_code():
    code, _, err = call("plan", "--s0c", "16", "--nc", "10000", "--p", "1", "--eps", "1",
                        "--sigma", "8", "--r0", "1/e", "--k", "25000", "--delta-target", "1e-40")
    assert code == 1 and "sigma" in err


def test_run_with_plan_file(workdir):
    write_libsvm(synthetic_dataset(3000, 5, seed=4), workdir / "big.libsvm")
    plan_path = workdir / "plan.cfg"
    code, _, err = call("plan", "--s0c", "4", "--nc", "1000", "--p", "1", "--eps", "1",
                        "--sigma", "8", "--r0", "1/e", "--k", "400", "--out", str(plan_path))
    assert code == 0, err
    text = (BASE.replace("data.libsvm", "big.libsvm").replace("[run]\nK = 800\n", "[run]\n")
            + "[dp]\nplan = plan.cfg\nC = 0.1\n")
    exp = parse_config(write_cfg(workdir, text))
    tr = run(build_sim_config(exp))
    assert tr.summary["noise_draws"] == 3 * tr.T
    assert tr.summary["K"] == 3 * 400


def test_check_schedule(workdir):
    code, out, _ = call("check-schedule", "--config", write_cfg(workdir, BASE))
    assert code == 0 and "OK" in out


def test_compare(workdir):
    a = write_cfg(workdir, BASE, "a.cfg")
    b = write_cfg(workdir, BASE.replace("kind = linear\na = 4\nb = 8", "kind = constant\nb = 20"),
                  "b.cfg")
    code, out, _ = call("compare", "--config", a, "--config", b)
    assert code == 0 and len(out.strip().splitlines()) == 3


def test_audit_fresh_and_from_events(workdir):
    path = write_cfg(workdir, BASE)
    code, out, _ = call("audit", "--config", path)
    assert code == 0 and out.startswith("PASS")
    ev = workdir / "ev.jsonl"
    assert call("run", "--config", path, "--log-events", str(ev), "--csv",
                str(workdir / "m.csv"))[0] == 0
    assert call("audit", "--config", path, "--events", str(ev))[0] == 0
    # plant a fault: a late step that claims to hold nothing
    lines = ev.read_text().splitlines()
    steps = [json.loads(x) for x in lines if '"ev": "step"' in x]
    victim = max(steps, key=lambda s: s["t"])
    bad = []
    for x in lines:
        obj = json.loads(x)
        if obj.get("ev") == "step" and obj["t"] == victim["t"]:
            obj["prefix_end"], obj["rounds"] = 0, []
        bad.append(json.dumps(obj))
    ev.write_text("\n".join(bad) + "\n")
    code, out, _ = call("audit", "--config", path, "--events", str(ev))
    assert code == 2 and f"t={victim['t']}" in out


def test_usage_errors():
    assert call("frobnicate")[0] == 1
    assert call("run")[0] == 1
    assert call("plan", "--s0c", "x")[0] == 1


def test_config_error_exit(workdir):
    code, _, err = call("run", "--config", write_cfg(workdir, "[run]\nK = -3\n"))
    assert code == 1 and "config error" in err
