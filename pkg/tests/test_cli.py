import json

import numpy as np
import pytest

from bangbang import io as bio
from bangbang.cli import main
from bangbang.model import cost_vector
from bangbang.opensystem import DephasingConfig, RedfieldConfig, dephasing_evolve, redfield_evolve
from bangbang.statevector import energy, evolve_protocol, initial_state


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def instance_file(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    assert run("gen", "--n", 5, "--count", 1, "--seed", 3, "--out", out) == 0
    return next(out.glob("sk_*.json"))


@pytest.fixture(scope="module")
def optimized(instance_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("opt")
    assert run("optimize", instance_file, "--T", 2, "--certify", "--restarts", 2, "--out", out) == 0
    return out


def test_gen_is_byte_reproducible(tmp_path):
    assert run("gen", "--n", 4, "--count", 1, "--seed", 8, "--out", tmp_path / "a") == 0
    assert run("gen", "--n", 4, "--count", 1, "--seed", 8, "--out", tmp_path / "b") == 0
    fa = sorted((tmp_path / "a").glob("sk_*.json"))
    fb = sorted((tmp_path / "b").glob("sk_*.json"))
    assert len(fa) == 1
    assert fa[0].read_bytes() == fb[0].read_bytes()
    assert (tmp_path / "a" / "manifest.json").exists()


def test_gen_many_distinct_and_round_trip(tmp_path):
    assert run("gen", "--n", 6, "--count", 50, "--out", tmp_path) == 0
    files = sorted(tmp_path.glob("sk_*.json"))
    assert len(files) == 50
    insts = [bio.read_instance(f) for f in files]
    assert len({inst.J.tobytes() for inst in insts}) == 50
    for f, inst in zip(files, insts):
        assert bio.instance_from_dict(json.loads(f.read_text())) == inst


def test_optimize_outputs(optimized):
    names = {p.name for p in optimized.iterdir()}
    assert names == {"manifest.json", "protocol.json", "result.csv", "result.json",
                     "switching_trace.csv", "switch_report.json"}
    assert (optimized / "switching_trace.csv").read_text().splitlines()[0] == "time,phi,g"
    header = (optimized / "result.csv").read_text().splitlines()[0]
    assert header == ("instance_seed,n,T,method,pulses,final_energy,energy_error,"
                      "fidelity_error,success_prob,evaluations")


def test_optimized_protocol_is_stationary(optimized):
    report = json.loads((optimized / "switch_report.json").read_text())
    assert report["interior_fraction"] == 0.0
    assert max(report["switch_residuals"]) < 1e-3


@pytest.mark.xfail(strict=True, reason="the 40-pulse optimum chatters on a singular arc; "
                   "wrong-sign excursions of phi exceed 1e-3 (see decisions ledger)")
def test_optimized_certificate_passes(optimized):
    report = json.loads((optimized / "switch_report.json").read_text())
    assert report["status"] == "pass"


def test_optimize_mc_is_nearly_bang_bang(tmp_path):
    # the first instance of seed 0; some other instances have a genuine interior arc at this T
    assert run("gen", "--n", 5, "--count", 1, "--seed", 0, "--out", tmp_path / "g") == 0
    instance_file = next((tmp_path / "g").glob("sk_*.json"))
    assert run("optimize", instance_file, "--method", "mc", "--T", 0.8, "--slices", 40, "--out", tmp_path / "o") == 0
    p = bio.read_protocol(tmp_path / "o" / "protocol.json")
    g = p.gs
    assert np.mean((g < 0.01) | (g > 0.99)) >= 0.95


def test_usage_errors(instance_file, tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("optimize", instance_file, "--method", "annealing", "--T", 1, "--out", tmp_path)
    assert exc.value.code == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"n": 3}')
    assert run("optimize", bad, "--T", 1, "--out", tmp_path / "o") == 2
    assert run("evolve", instance_file, "--out", tmp_path / "e") == 2


def test_output_dir_conflict(instance_file, tmp_path):
    assert run("qaa", instance_file, "--T", 1, "--out", tmp_path) == 0
    assert run("qaa", instance_file, "--T", 2, "--out", tmp_path) == 1


def read_metrics(path):
    return json.loads((path / "metrics.json").read_text())


def test_evolve_closed_and_noise_limits(instance_file, optimized, tmp_path):
    prot = optimized / "protocol.json"
    inst = bio.read_instance(instance_file)
    cv = cost_vector(inst)
    p = bio.read_protocol(prot)
    psi = evolve_protocol(initial_state(5), p, cv)
    assert run("evolve", instance_file, prot, "--out", tmp_path / "c") == 0
    closed = read_metrics(tmp_path / "c")
    assert closed["energy_error"] == energy(psi, cv) - cv.ground_energy
    assert run("evolve", instance_file, prot, "--dephasing", 0, "--out", tmp_path / "d") == 0
    assert run("evolve", instance_file, prot, "--redfield", 0, 2, "--out", tmp_path / "r") == 0
    for sub in ("d", "r"):
        m = read_metrics(tmp_path / sub)
        assert abs(m["fidelity_error"] - closed["fidelity_error"]) < 1e-6
        assert abs(m["energy_error"] - closed["energy_error"]) < 1e-6
        assert m["diagnostics"]["min_eigenvalue"] >= -1e-6


def test_evolve_noisy_matches_library(instance_file, optimized, tmp_path):
    prot = optimized / "protocol.json"
    inst = bio.read_instance(instance_file)
    p = bio.read_protocol(prot)
    assert run("evolve", instance_file, prot, "--dephasing", 0.01, "--out", tmp_path / "d") == 0
    ref = dephasing_evolve(None, p, DephasingConfig(0.01), inst)
    assert read_metrics(tmp_path / "d")["fidelity_error"] == ref.diagnostics["fidelity_error"]
    assert run("evolve", instance_file, "--ramp", 1.0, "--redfield", 0.01, 2, "--out", tmp_path / "r") == 0
    from bangbang.statevector import ramp_protocol

    ref = redfield_evolve(None, ramp_protocol(1.0), RedfieldConfig(0.01, 2.0), inst)
    assert read_metrics(tmp_path / "r")["fidelity_error"] == ref.diagnostics["fidelity_error"]


def test_invariant_violation_exit_code(instance_file, tmp_path):
    # a strong bath with a huge step cannot keep the trace even after halving
    code = run("evolve", instance_file, "--ramp", 1.0, "--dephasing", 20, "--step", 0.5, "--out", tmp_path)
    assert code == 3


def test_certify_and_qaa_commands(instance_file, optimized, tmp_path):
    assert run("certify", instance_file, optimized / "protocol.json", "--out", tmp_path / "c") == 0
    a = json.loads((tmp_path / "c" / "switch_report.json").read_text())
    b = json.loads((optimized / "switch_report.json").read_text())
    assert a == b
    assert run("qaa", instance_file, "--T", 2, "--out", tmp_path / "q") == 0
    row = bio.read_csv(tmp_path / "q" / "result.csv")[0]
    assert row["method"] == "qaa" and row["pulses"] == "0"


def write_config(path, **cfg):
    path.write_text(json.dumps(cfg))
    return path


def test_sweep_of_size_one_matches_single_runs(tmp_path):
    cfg = write_config(tmp_path / "g.json", n=4, T=1.0, instances=1, seed=5, W=[0.01],
                       options={"restarts": 1, "max_pulses": 10})
    assert run("sweep", cfg, "--out", tmp_path / "s") == 0
    assert run("gen", "--n", 4, "--count", 1, "--seed", 5, "--out", tmp_path / "g") == 0
    inst_file = next((tmp_path / "g").glob("sk_*.json"))
    assert run("optimize", inst_file, "--T", 1.0, "--restarts", 1, "--max-pulses", 10, "--out", tmp_path / "o") == 0
    sweep_rows = bio.read_csv(tmp_path / "s" / "results.csv")
    single = bio.read_csv(tmp_path / "o" / "result.csv")
    assert sweep_rows[0] == single[0]
    assert run("evolve", inst_file, tmp_path / "o" / "protocol.json", "--dephasing", 0.01,
               "--out", tmp_path / "e") == 0
    noise = bio.read_csv(tmp_path / "s" / "noise.csv")
    m = read_metrics(tmp_path / "e")
    assert float(noise[0]["fidelity_error"]) == m["fidelity_error"]
    header = (tmp_path / "s" / "comparison.csv").read_text().splitlines()[0]
    assert header.startswith("n,T,noise,strength,method,pairs")


def test_sweep_resume_and_determinism(tmp_path):
    cfg = write_config(tmp_path / "g.json", n=[3, 4], T=[0.8], instances=2, seed=1,
                       options={"restarts": 1, "max_pulses": 8})
    assert run("sweep", cfg, "--out", tmp_path / "a") == 0
    assert run("sweep", cfg, "--out", tmp_path / "b", "--threads", 2) == 0
    for name in ("results.csv", "comparison.csv", "histograms_bb.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    # drop one job and a summary; the rerun only recomputes what is missing
    jobs = sorted((tmp_path / "a" / "jobs").glob("*.json"))
    kept = {p.name: p.stat().st_mtime_ns for p in jobs[1:]}
    jobs[0].unlink()
    (tmp_path / "a" / "results.csv").unlink()
    assert run("sweep", cfg, "--out", tmp_path / "a") == 0
    assert {p.name: p.stat().st_mtime_ns for p in sorted((tmp_path / "a" / "jobs").glob("*.json"))[1:]} == kept
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()


def test_fig3_style_sweep_emits_one_histogram_per_size(tmp_path):
    cfg = write_config(tmp_path / "g.json", n=[6, 7, 8, 9, 10], T=2.0, instances=1,
                       options={"restarts": 1, "max_pulses": 8})
    assert run("sweep", cfg, "--out", tmp_path / "s") == 0
    rows = bio.read_csv(tmp_path / "s" / "histograms_bb.csv")
    assert sorted({r["n"] for r in rows}) == ["10", "6", "7", "8", "9"]
    for n in {r["n"] for r in rows}:
        assert sum(float(r["probability"]) for r in rows if r["n"] == n) == pytest.approx(1.0)


@pytest.mark.parametrize("cfg", [
    {"n": [], "T": [1.0]},
    {"n": [3], "T": [-1.0]},
    {"n": [3], "T": [1.0], "method": ["sa"]},
    {"n": [3], "T": [1.0], "grid": 1},
    {"T": [1.0]},
    {"n": [3], "T": [1.0], "instances": 2, "selection": 5},
])
def test_invalid_sweep_grids(tmp_path, cfg):
    assert run("sweep", write_config(tmp_path / "g.json", **cfg), "--out", tmp_path / "s") == 2


def test_hist_command(optimized, tmp_path):
    assert run("hist", optimized / "protocol.json", "--n", 5, "--out", tmp_path) == 0
    rows = bio.read_csv(tmp_path / "histogram.csv")
    assert list(rows[0]) == ["n", "T", "bin_center", "probability", "samples"]
    assert sum(float(r["probability"]) for r in rows) == pytest.approx(1.0)
    assert run("hist", tmp_path / "nothing", "--out", tmp_path / "h2") == 2
