# tests/test_registry_config.py
import json

import numpy as np
import pytest

from conftest import ROOT, write_config
from sa_lab.config import (
    ExperimentConfig,
    default_burn_in,
    load_config,
    locate,
    parse_config,
    problem_errors,
)
from sa_lab.controlled_kernels import Draws, sample_next
from sa_lab.errors import ConfigurationError
from sa_lab.registry import KERNELS, build_kernel, build_map

BASE = """
seed = 11
analyses = ["bias"]

[problem.kernel]
name = "finite2"
params = { a0 = 0.3, ka = 0.2, b0 = 0.4, kb = 0.1 }

[problem.map]
name = "linear_hx"
params = { h = [2.0, -1.0] }

[sweep]
alphas = [0.04, 0.02, 0.01]
replicas = 4
"""


def _errors(text: str):
    config, errors = parse_config(text)
    return config, {e.field: e for e in errors}


# --- P0: registry ------------------------------------------------------------------------


@pytest.mark.p0
def test_unknown_kernel_lists_builtins():
    with pytest.raises(ConfigurationError) as exc:
        build_kernel("ising", {})
    assert exc.value.field == "kernel.name"
    for name in KERNELS:
        assert name in str(exc.value)


@pytest.mark.p0
def test_kernel_params_are_validated():
    with pytest.raises(ConfigurationError) as exc:
        build_kernel("finite2", {"a0": 2.0})
    assert exc.value.field == "kernel.params.a0"
    with pytest.raises(ConfigurationError) as exc:
        build_kernel("clipped_ar", {"rho": 0.5, "typo": 1})
    assert exc.value.field == "kernel.params.typo"


@pytest.mark.p1
def test_map_table_must_match_states():
    kernel = build_kernel("finite2", {})
    with pytest.raises(ConfigurationError, match="table shape"):
        build_map("linear_hx", {"h": [1.0, 2.0, 3.0]}, kernel)
    with pytest.raises(ConfigurationError, match="finite kernels need a per-state table"):
        build_map("linear_hx", {}, kernel)


@pytest.mark.p1
def test_finite_table_map_interpolates():
    kernel = build_kernel("finite2", {})
    update = build_map("finite_table", {"theta_grid": [0.0, 1.0], "values": [[0.0, 2.0], [1.0, 4.0]]}, kernel)
    out = update.evaluate(np.array([[0.5], [0.5], [2.0]]), np.array([0, 1, 1]))
    assert np.allclose(out[:, 0], [0.5, 3.0, 6.0])


@pytest.mark.p1
def test_langevin_stays_in_box():
    kernel = build_kernel("proj_langevin", {"eta": 0.5, "lower": [-1.0], "upper": [1.0]})
    x = sample_next(kernel, [0.0], [0.9], Draws(np.empty(0), np.array([10.0])))
    assert x == 1.0


@pytest.mark.p1
def test_metropolis_accepts_downhill_and_rejects_far_uphill():
    """Target centred at shift*theta = 0: a move to 0 is always accepted, a move 10 units out is not."""
    kernel = build_kernel("rw_mh", {"proposal_scale": 1.0, "shift": 0.5})
    downhill = sample_next(kernel, [0.0], [1.0], Draws(np.array([0.999]), np.array([-1.0])))
    uphill = sample_next(kernel, [0.0], [0.0], Draws(np.array([0.001]), np.array([10.0])))
    assert downhill == 0.0
    assert uphill == 0.0


# --- P0: experiment configs ------------------------------------------------------------------


@pytest.mark.p0
def test_base_config_is_valid():
    config, errors = _errors(BASE)
    assert not errors
    assert config.sweep.alphas == [0.04, 0.02, 0.01]
    assert config.uses_sweep and config.problem.noise.kind == "none"


@pytest.mark.p0
def test_increasing_alphas_are_rejected_with_line():
    text = BASE.replace("[0.04, 0.02, 0.01]", "[0.01, 0.02]")
    config, errors = _errors(text)
    assert config is None
    err = errors["sweep.alphas"]
    assert "strictly decreasing" in err.message
    assert err.line == text.splitlines().index("alphas = [0.01, 0.02]") + 1


@pytest.mark.p0
def test_bias_needs_two_replicas():
    _, errors = _errors(BASE.replace("replicas = 4", "replicas = 1"))
    assert any("bias requires replicas >= 2" in e.message for e in errors.values())


@pytest.mark.p0
def test_decomposition_alphas_are_validated_like_the_sweep():
    """Steps:
    1. Ask for a decomposition at alpha = 1.5
    2. Validation fails on decomposition.alphas with the line of the offending key
    """
    text = BASE.replace('analyses = ["bias"]', 'analyses = ["decomposition"]') + "\n[decomposition]\nalphas = [1.5]\n"
    config, errors = _errors(text)
    assert config is None
    err = errors["decomposition.alphas"]
    assert "(0, 1]" in err.message
    assert err.line == text.splitlines().index("alphas = [1.5]") + 1
    _, increasing = _errors(text.replace("alphas = [1.5]", "alphas = [0.01, 0.02]"))
    assert "strictly decreasing" in increasing["decomposition.alphas"].message


@pytest.mark.p1
def test_clt_needs_enough_replicas():
    text = BASE.replace('analyses = ["bias"]', 'analyses = ["clt"]') + "\n[clt]\nreplicas = 100\n"
    _, errors = _errors(text)
    assert any("clt.replicas >= 200" in e.message for e in errors.values())


@pytest.mark.p1
def test_finite_only_analyses_need_finite_kernel():
    text = (
        BASE.replace('analyses = ["bias"]', 'analyses = ["wd_scan"]')
        .replace('name = "finite2"', 'name = "clipped_ar"')
        .replace("params = { a0 = 0.3, ka = 0.2, b0 = 0.4, kb = 0.1 }", "params = {}")
    )
    _, errors = _errors(text)
    assert any("require a finite kernel" in e.message for e in errors.values())


@pytest.mark.p1
def test_unknown_keys_and_analyses_are_rejected():
    _, errors = _errors(BASE + "\n[sweep_typo]\nx = 1\n")
    assert "sweep_typo" in errors
    _, errors = _errors(BASE.replace('["bias"]', '["bias", "plots"]'))
    assert any(field.startswith("analyses") for field in errors)


@pytest.mark.p1
def test_toml_syntax_error_reports_line():
    config, errors = parse_config("seed = 1\nanalyses = [\n[problem\n")
    assert config is None
    assert errors[0].field == "toml" and errors[0].line is not None


@pytest.mark.p1
def test_unknown_kernel_in_problem_section():
    text = BASE.replace('name = "finite2"', 'name = "ising"')
    config, errors = parse_config(text)
    problems = problem_errors(config, text)
    assert problems[0].field == "problem.kernel.name"
    assert "built-ins" in problems[0].message
    assert problems[0].line == text.splitlines().index('name = "ising"') + 1


@pytest.mark.p1
def test_config_hash_ignores_output_dir_only():
    config, _ = parse_config(BASE)
    moved = config.model_copy(update={"output_dir": "elsewhere"})
    reseeded = config.model_copy(update={"seed": 12})
    assert moved.config_hash() == config.config_hash()
    assert reseeded.config_hash() != config.config_hash()


@pytest.mark.p1
def test_manifest_config_round_trips(tmp_path):
    config, _ = parse_config(BASE)
    manifest = tmp_path / "manifest.json"
    manifest.write_text(json.dumps({"version": "x", "config": config.reproducible_dump()}), encoding="utf-8")
    again = load_config(manifest)
    assert again.config_hash() == config.config_hash()


@pytest.mark.p1
@pytest.mark.parametrize("path", sorted((ROOT / "configs").glob("*.toml")), ids=lambda p: p.name)
def test_shipped_configs_load(path):
    config = load_config(path)
    assert isinstance(config, ExperimentConfig)
    assert config.analyses


@pytest.mark.p2
def test_load_config_raises_with_every_error(tmp_path):
    path = write_config(tmp_path / "bad.toml", BASE.replace("replicas = 4", "replicas = 0").replace("seed = 11", "seed = -1"))
    with pytest.raises(ConfigurationError) as exc:
        load_config(path)
    assert "seed" in str(exc.value) and "sweep.replicas" in str(exc.value)


@pytest.mark.p2
def test_locate_prefers_key_inside_section():
    source = "seed = 1\n[sweep]\nreplicas = 4\n[coupling]\nreplicas = 8\n"
    assert locate(source, ("coupling", "replicas")) == 5
    assert locate(source, ("sweep", "replicas")) == 3
    assert locate(source, ("sweep", "missing")) == 2
    assert locate(source, ("seed",)) == 1


@pytest.mark.p2
def test_default_burn_in_is_a_tenth():
    assert default_burn_in(1000) == 100
    assert default_burn_in(5) == 1
