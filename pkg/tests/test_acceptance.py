"""End-to-end acceptance checks; each test records a PASS/FAIL verdict line."""
import json
import subprocess
import sys
import time
from pathlib import Path

import pytest

import conftest
from fanlasso.cli import main
from fanlasso.config import resolve
from fanlasso.data import read_results, write_crime_like
from fanlasso.factor import default_threshold
from fanlasso.simulate import run_covariate_experiment, run_posterior_experiment
from oracles import default_threshold_oracle

TESTS = Path(__file__).parent


def verdict(num, checks, extra=""):
    """Record and print the verdict, then fail with the unmet checks listed."""
    ok = all(v for _, v in checks)
    failed = [name for name, v in checks if not v]
    detail = (extra + " " if extra else "") + (("met: " + "; ".join(n for n, _ in checks)) if ok else "unmet: " + "; ".join(failed))
    conftest.ACCEPTANCE[num] = (ok, detail)
    print(f"CRITERION {num}: {'PASS' if ok else 'FAIL'} | {detail}")
    assert ok, detail


def test_criterion_1_covariate_shift_ordering():
    cfg, _ = resolve("sim-covariate", preset="desk")
    assert (cfg.p, cfg.r, cfg.loading_shift_scale, cfg.n_p_grid, cfg.replications) == \
        (300, 4, 0.5, (100, 200, 300), 20)
    start = time.monotonic()
    res = run_covariate_experiment(cfg)
    elapsed = time.monotonic() - start
    nu = lambda m, n_p, n_q: res.mean(m, "nu_min", n_p, n_q)  # noqa: E731
    checks = [(f"TL(7) > Q(7) at n_p={n_p} ({nu('Transfer', n_p, 7):.4f} vs {nu('TargetOnly', n_p, 7):.4f})",
               nu("Transfer", n_p, 7) > nu("TargetOnly", n_p, 7)) for n_p in cfg.n_p_grid]
    checks.append((f"TL(7) > Q(10) at n_p=300 ({nu('Transfer', 300, 7):.4f} vs {nu('TargetOnly', 300, 10):.4f})",
                   nu("Transfer", 300, 7) > nu("TargetOnly", 300, 10)))
    checks.append((f"P below TL(7) at n_p=300 ({nu('SourceOnly', 300, 7):.4f} vs {nu('Transfer', 300, 7):.4f})",
                   nu("SourceOnly", 300, 7) < nu("Transfer", 300, 7)))
    checks.append((f"runtime < 5 min ({elapsed:.0f}s)", elapsed < 300))
    verdict(1, checks)


def test_criterion_2_posterior_shift_ordering():
    cfg, _ = resolve("sim-posterior", preset="desk")
    assert (cfg.p, cfg.n_p_train, cfg.n_q_grid, cfg.replications) == (500, 2000, (50, 200, 1000), 5)
    assert (cfg.arch.depth, cfg.arch.width, cfg.arch.n_sel) == (3, 50, 20)
    start = time.monotonic()
    res = run_posterior_experiment(cfg)
    elapsed = time.monotonic() - start
    rmse = lambda m, n_q: res.mean(m, "rmse", n_q=n_q)  # noqa: E731
    failures = [r for r in res.rows if r.metric == "failed"]
    checks = [(f"no failed fits ({len(failures)})", not failures)]
    for n_q in cfg.n_q_grid:
        fan = rmse("FanLasso", n_q)
        checks.append((f"FanLasso < FastNnSourceOnly at n_q={n_q} ({fan:.4f} vs {rmse('FastNnSourceOnly', n_q):.4f})",
                       fan < rmse("FastNnSourceOnly", n_q)))
        checks.append((f"FanLasso < VanillaSourceOnly at n_q={n_q} "
                       f"({fan:.4f} vs {rmse('VanillaSourceOnly', n_q):.4f})",
                       fan < rmse("VanillaSourceOnly", n_q)))
    ratio = rmse("FanLasso", 1000) / rmse("Oracle", 1000)
    checks.append((f"FanLasso within 1.5x Oracle at n_q=1000 (ratio {ratio:.3f})", ratio <= 1.5))
    checks.append((f"runtime < 30 min ({elapsed:.0f}s)", elapsed < 1800))
    verdict(2, checks)


def test_criterion_3_pipeline_on_fixture(tmp_path, capsys):
    wins, lines, codes = 0, [], []
    for seed in range(3):
        d = tmp_path / f"s{seed}"
        write_crime_like(d / "src.csv", 1500, seed)
        write_crime_like(d / "tgt.csv", 400, seed, domain="target")
        # the seed picks the fixture draw; training runs at the configured default seed
        desk = ["--preset", "desk"]
        codes.append(main([str(a) for a in ("train-source", "--source", d / "src.csv", "--target", d / "tgt.csv",
                                            "--out", d / "fast", *desk)]))
        codes.append(main([str(a) for a in ("train-source", "--source", d / "src.csv", "--out", d / "van",
                                            *desk, "--set", "model=vanilla")]))
        codes.append(main([str(a) for a in ("finetune", "--target", d / "tgt.csv", "--source-model",
                                            d / "fast/model.json", "--out", d / "fan", *desk)]))
        codes.append(main([str(a) for a in ("finetune", "--target", d / "tgt.csv", "--source-model",
                                            d / "van/model.json", "--out", d / "ftv", *desk,
                                            "--set", "model=vanilla")]))
        codes.append(main([str(a) for a in ("evaluate", "--model", d / "fan/model.json", "--data", d / "tgt.csv",
                                            "--out", d / "fan")]))
        fan = json.loads((d / "fan/run.json").read_text())["metrics"]["valid_rmse"]
        ftv = json.loads((d / "ftv/run.json").read_text())["metrics"]["valid_rmse"]
        wins += fan <= ftv
        lines.append(f"seed {seed}: {fan:.4f} vs {ftv:.4f}")
    capsys.readouterr()
    checks = [(f"all commands exit 0 ({codes})", all(c == 0 for c in codes)),
              (f"FanLasso valid RMSE <= FT-Vanilla in majority ({wins}/3)", wins >= 2)]
    verdict(3, checks, "[" + ", ".join(lines) + "]")


PROPERTY_SUITES = [
    "test_linalg.py::test_identity_degenerate_invariants",
    "test_linalg.py::test_random_6x6_matches_characteristic_polynomial",
    "test_linalg.py::test_eigen_invariants_property",
    "test_linalg.py::test_singular_matches_power_iteration_oracle",
    "test_linalg.py::test_subspace_distance_examples",
    "test_neuralnet.py::test_clipped_l1_examples",
    "test_neuralnet.py::test_clipped_l1_properties",
    "test_neuralnet.py::test_truncate_band",
    "test_neuralnet.py::test_gradient_matches_finite_differences",
    "test_neuralnet.py::test_full_batch_monotone_on_linear_net",
    "test_neuralnet.py::test_adam_first_step_closed_form",
    "test_fastnn.py::test_finetune_keeps_source_frozen",
    "test_simulate.py::test_factor_data_structure",
    "test_simulate.py::test_loading_target_shift_exact",
    "test_data.py::test_split_is_partition",
    "test_simulate.py::test_covariate_run_deterministic_bytes",
    "test_simulate.py::test_result_csv_roundtrip",
]


def test_criterion_4_numerical_property_suites():
    start = time.monotonic()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           *[str(TESTS / s) for s in PROPERTY_SUITES]],
                          capture_output=True, text=True, cwd=TESTS.parent)
    elapsed = time.monotonic() - start
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    checks = [(f"{len(PROPERTY_SUITES)} property tests green ({summary})", proc.returncode == 0),
              (f"runtime < 3 min ({elapsed:.0f}s)", elapsed < 180)]
    verdict(4, checks)


def test_criterion_5_threshold_spot_value():
    got = default_threshold(4, 1000, 307)
    want = default_threshold_oracle(4, 1000, 307)
    checks = [(f"matches 1.70683 within 1e-4 (got {got:.7f})", abs(got - 1.70683) <= 1e-4),
              (f"matches arithmetic oracle ({want:.7f})", got == pytest.approx(want, rel=1e-14))]
    verdict(5, checks)
