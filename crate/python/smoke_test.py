"""Smoke test for the servetune Python bindings.

Build and install first:
    pip install maturin
    maturin build --release -m crates/py/Cargo.toml -o dist
    pip install dist/servetune-*.whl
"""

import json
import os
import tempfile

import servetune


def check_types():
    pattern = servetune.LoadPattern(512, 128, duration=20.0, seed=1)
    assert pattern.input_len == 512 and pattern.to_dict()["output_len"] == 128
    config = servetune.RuntimeConfig.default_for(pattern)
    config.validate(pattern)
    assert config.gpus() == config.tensor_parallel * config.data_parallel
    try:
        servetune.LoadPattern(0, 128)
    except ValueError:
        pass
    else:
        raise AssertionError("zero input length accepted")


def check_fitness():
    assert servetune.fitness(8.0, 2, False) == 4.0
    assert servetune.fitness(8.0, 2, True) == -996.0


def check_stability():
    arrivals = [i * 0.1 for i in range(100)]
    steady = servetune.fit_stability(arrivals, [a + 0.5 for a in arrivals])
    assert steady.is_stable and abs(steady.beta - 1.0) < 1e-9
    growing = servetune.fit_stability(arrivals, [1.5 * a + 0.5 for a in arrivals])
    assert not growing.is_stable


def check_sweep():
    pattern = servetune.LoadPattern(512, 128, duration=20.0, seed=1)
    slos = [{"metric": {"kind": "TTFT", "percentile": 95}, "threshold_ms": 500.0}]
    result = servetune.sweep_sim(pattern, slos=slos)
    assert result.status == "FEASIBLE", result
    assert result.best_rate > 0 and result.open_loop_trials <= 12
    assert any(passed for _, passed in result.rates)

    strict = [{"metric": {"kind": "E2E_LATENCY", "percentile": 50}, "threshold_ms": 1.0}]
    infeasible = servetune.sweep_sim(pattern, slos=strict)
    assert (infeasible.status, infeasible.best_rate) == ("INFEASIBLE", 0.0)


def check_tune():
    pattern = servetune.LoadPattern(512, 128, duration=20.0, seed=1)
    archive = servetune.tune_sim(pattern, tuner={"n_trials": 8, "seed": 2}, max_gpus=4)
    assert len(archive["trials"]) == 8
    assert archive["best_fitness"] == max(t["fitness"] for t in archive["trials"])


def check_calibration():
    corpus = [[i] * (i + 1) for i in range(20)]
    subset = servetune.sample_calibration(corpus, 5, seed=3)
    assert len(subset) == 5 and all(s in corpus for s in subset)
    assert subset == servetune.sample_calibration(list(reversed(corpus)), 5, seed=3)
    strata = servetune.sample_calibration(corpus, 8, seed=3, strategy="TOKEN_STRATIFIED")
    assert len(strata) == 8
    assert servetune.get_recipe("int_w8a8")["calibration_samples"] == 256


def check_flow():
    spec = {
        "name": "py-smoke",
        "flow": "quantize_tune",
        "model": {"name": "llama", "version": "v1.0"},
        "flow_params": {
            "quantization_recipe": "int_w8a8",
            "num_trials": 3,
            "load_pattern": {"input_len": 256, "output_len": 64, "duration": 10.0},
            "tuner": {"n_trials": 6},
        },
        "resources": {"slots": 4},
    }
    servetune.validate_spec(spec)
    summary, jsonl = servetune.submit(json.dumps(spec))
    assert summary["status"] == "OK" and summary["c_star"] is not None
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "a.jsonl")
        with open(path, "w") as f:
            f.write(jsonl)
        records = servetune.read_archive(path)
    assert records[0]["record"] == "header"
    assert records[0]["schema_version"] == servetune.SCHEMA_VERSION

    bad = dict(spec, flow_params={"num_trials": 0})
    try:
        servetune.validate_spec(bad)
    except ValueError as e:
        assert "flow_params.quantization_recipe" in str(e)
    else:
        raise AssertionError("invalid spec accepted")


def main():
    for check in [check_types, check_fitness, check_stability, check_sweep, check_tune, check_calibration, check_flow]:
        check()
        print(f"ok  {check.__name__}")


if __name__ == "__main__":
    main()
